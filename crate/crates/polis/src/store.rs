//! On-disk client state: an identity file, an index, one file per group and
//! an inbox holding a fetched but not yet processed sync batch.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use polis_core::client::{Client, GroupState};
use polis_core::mls::GroupCryptoState;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::proto::SyncResult;

/// Writes through a temporary file and a rename so readers never see a
/// torn file.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value).map_err(io::Error::other)?)?;
    fs::rename(tmp, path)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> io::Result<T> {
    serde_json::from_slice(&fs::read(path)?).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

#[derive(Serialize, Deserialize)]
struct GroupFile {
    mls: GroupCryptoState,
    state: GroupState,
}

#[derive(Serialize, Deserialize, Default)]
struct Index {
    groups: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Store {
    dir: PathBuf,
}

impl Store {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn group_path(&self, group_id: &str) -> PathBuf {
        self.dir.join("groups").join(format!("{}.json", hex::encode(group_id)))
    }

    pub fn exists(&self) -> bool {
        self.path("identity.json").exists()
    }

    pub fn save(&self, client: &Client) -> io::Result<()> {
        for gid in client.groups.keys() {
            if let Some((mls, state)) = client.export_group(gid) {
                write_json(&self.group_path(gid), &GroupFile { mls, state })?;
            }
        }
        write_json(&self.path("index.json"), &Index { groups: client.groups.keys().cloned().collect() })?;
        write_json(&self.path("identity.json"), &client.without_groups())
    }

    pub fn load(&self) -> io::Result<Client> {
        let mut client: Client = read_json(&self.path("identity.json"))?;
        let index: Index = read_json(&self.path("index.json")).unwrap_or_default();
        for gid in index.groups {
            let f: GroupFile = read_json(&self.group_path(&gid))?;
            client.import_group(f.mls, f.state);
        }
        Ok(client)
    }

    pub fn save_inbox(&self, batch: &SyncResult) -> io::Result<()> {
        write_json(&self.path("inbox.json"), batch)
    }

    pub fn load_inbox(&self) -> Option<SyncResult> {
        read_json(&self.path("inbox.json")).ok()
    }

    pub fn clear_inbox(&self) -> io::Result<()> {
        match fs::remove_file(self.path("inbox.json")) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }
}
