use std::collections::HashSet;
use std::sync::{Arc, Mutex};

/// Per-session write leases. At most one mutating request holds a session.
#[derive(Debug, Clone, Default)]
pub struct Leases {
    held: Arc<Mutex<HashSet<String>>>,
}

/// Released on drop.
#[derive(Debug)]
pub struct Lease {
    id: String,
    held: Arc<Mutex<HashSet<String>>>,
}

impl Leases {
    /// `None` when another request already holds `id`.
    pub fn try_acquire(&self, id: &str) -> Option<Lease> {
        let mut held = self.held.lock().unwrap();
        held.insert(id.to_string()).then(|| Lease {
            id: id.to_string(),
            held: self.held.clone(),
        })
    }

    pub fn is_held(&self, id: &str) -> bool {
        self.held.lock().unwrap().contains(id)
    }
}

impl Drop for Lease {
    fn drop(&mut self) {
        self.held.lock().unwrap().remove(&self.id);
    }
}
