use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{sha256_hex, ChartImage, Session};
use crate::clock::is_valid_id;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("session {0} not found")]
    NotFound(String),
    #[error("corrupt record for session {id}: {reason}")]
    CorruptRecord { id: String, reason: String },
    #[error("store I/O error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Serialize)]
struct DocumentOut<'a> {
    schema_version: u32,
    #[serde(flatten)]
    session: &'a Session,
}

#[derive(Deserialize)]
struct DocumentIn {
    schema_version: u32,
    #[serde(flatten)]
    session: Session,
}

/// Directory-backed session store.
///
/// Layout: `<root>/sessions/<id>/session.json` and
/// `<root>/sessions/<id>/blobs/<sha256>`. Documents are replaced atomically,
/// so concurrent readers never observe a partial write.
#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("sessions"))?;
        Ok(SessionStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    pub fn document_path(&self, id: &str) -> PathBuf {
        self.session_dir(id).join("session.json")
    }

    pub fn blob_path(&self, id: &str, sha256: &str) -> PathBuf {
        self.session_dir(id).join("blobs").join(sha256)
    }

    pub fn exists(&self, id: &str) -> bool {
        is_valid_id(id) && self.document_path(id).is_file()
    }

    /// Serializes a session document exactly as it is written to disk.
    pub fn to_document(session: &Session) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(&DocumentOut {
            schema_version: SCHEMA_VERSION,
            session,
        })
        .expect("session serializes");
        out.push(b'\n');
        out
    }

    pub fn save(&self, session: &Session) -> Result<(), StoreError> {
        if !is_valid_id(&session.id) {
            return Err(StoreError::Io(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("invalid session id {:?}", session.id),
            )));
        }
        let dir = self.session_dir(&session.id);
        fs::create_dir_all(dir.join("blobs"))?;
        for image in images(session) {
            if image.bytes.is_empty() {
                continue;
            }
            let path = self.blob_path(&session.id, &image.sha256);
            if !path.exists() {
                write_atomic(&path, &image.bytes)?;
            }
        }
        write_atomic(&dir.join("session.json"), &Self::to_document(session))?;
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<Session, StoreError> {
        if !self.exists(id) {
            return Err(StoreError::NotFound(id.to_string()));
        }
        let corrupt = |reason: String| StoreError::CorruptRecord {
            id: id.to_string(),
            reason,
        };
        let raw = fs::read(self.document_path(id))?;
        let doc: DocumentIn = serde_json::from_slice(&raw).map_err(|e| corrupt(e.to_string()))?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(corrupt(format!("unsupported schema_version {}", doc.schema_version)));
        }
        let mut session = doc.session;
        if session.id != id {
            return Err(corrupt(format!("document id {} does not match directory", session.id)));
        }
        for image in images_mut(&mut session) {
            let path = self.blob_path(id, &image.sha256);
            let bytes = fs::read(&path).map_err(|e| corrupt(format!("blob {}: {e}", image.sha256)))?;
            if sha256_hex(&bytes) != image.sha256 {
                return Err(corrupt(format!("blob {} fails its hash", image.sha256)));
            }
            image.bytes = bytes;
        }
        session
            .check_invariants()
            .map_err(|e| corrupt(e.to_string()))?;
        Ok(session)
    }

    /// Ids of every stored session, sorted.
    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(self.root.join("sessions"))? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if self.exists(&name) {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }
}

fn images(session: &Session) -> impl Iterator<Item = &ChartImage> {
    std::iter::once(&session.image).chain(
        session
            .revisions
            .iter()
            .filter_map(|r| r.render.as_ref())
            .filter_map(|r| r.image.as_ref()),
    )
}

fn images_mut(session: &mut Session) -> impl Iterator<Item = &mut ChartImage> {
    std::iter::once(&mut session.image).chain(
        session
            .revisions
            .iter_mut()
            .filter_map(|r| r.render.as_mut())
            .filter_map(|r| r.image.as_mut()),
    )
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().expect("path has a parent");
    let tmp = dir.join(format!(
        ".{}.tmp-{}-{:?}",
        path.file_name().unwrap().to_string_lossy(),
        std::process::id(),
        std::thread::current().id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
