//! Data items addressed by (machine, directory, name). Files live under each
//! machine's sandboxed filesystem root and are only reached through
//! [`MachineRegistry::resolve`].

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::engine::Engine;
use crate::ids::{DataId, IncidentId};
use crate::machine::MachineRegistry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataItem {
    pub data_id: DataId,
    pub name: String,
    pub machine_name: String,
    /// Directory holding the file.
    pub path: PathBuf,
    pub description: String,
    pub mime_type: String,
    pub size_bytes: u64,
    pub incident_id: IncidentId,
    pub created_at: DateTime<Utc>,
}

impl DataItem {
    pub fn file_path(&self) -> PathBuf {
        self.path.join(&self.name)
    }
}

/// Where and how to store a payload.
#[derive(Debug, Clone)]
pub struct PutRequest {
    pub incident_id: IncidentId,
    pub name: String,
    pub machine_name: String,
    pub description: String,
    pub mime_type: String,
    pub path: PathBuf,
}

impl PutRequest {
    pub fn new(incident_id: IncidentId, name: &str, machine_name: &str, path: impl Into<PathBuf>) -> Self {
        Self {
            incident_id,
            name: name.to_string(),
            machine_name: machine_name.to_string(),
            description: String::new(),
            mime_type: "application/octet-stream".into(),
            path: path.into(),
        }
    }

    pub fn description(mut self, d: &str) -> Self {
        self.description = d.to_string();
        self
    }

    pub fn mime_type(mut self, m: &str) -> Self {
        self.mime_type = m.to_string();
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("unknown data item `{0}`")]
    UnknownDataItem(DataId),
    #[error("{0}")]
    DataManagerError(String),
}

fn dm_err(msg: impl Into<String>) -> DataError {
    DataError::DataManagerError(msg.into())
}

#[derive(Default)]
struct DataState {
    items: BTreeMap<DataId, DataItem>,
    next: u64,
}

pub struct DataManager {
    machines: MachineRegistry,
    engine: Option<Arc<Engine>>,
    state: Mutex<DataState>,
}

impl DataManager {
    pub fn new(machines: MachineRegistry) -> Self {
        Self {
            machines,
            engine: None,
            state: Mutex::new(DataState::default()),
        }
    }

    /// Link stored items to their incidents in `engine`.
    pub fn with_engine(mut self, engine: Arc<Engine>) -> Self {
        self.engine = Some(engine);
        self
    }

    fn lock(&self) -> MutexGuard<'_, DataState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn resolve_dir(&self, machine: &str, path: &Path) -> Result<PathBuf, DataError> {
        if self.machines.get(machine).is_none() {
            return Err(dm_err(format!("unknown machine `{machine}`")));
        }
        let dir = self
            .machines
            .resolve(machine, path)
            .ok_or_else(|| dm_err(format!("{} is outside the filesystem of {machine}", path.display())))?;
        if !dir.is_dir() {
            return Err(dm_err(format!("{} does not exist on {machine}", path.display())));
        }
        Ok(dir)
    }

    fn check_name(name: &str) -> Result<(), DataError> {
        let plain = Path::new(name).file_name().is_some_and(|f| f == name);
        if name.is_empty() || !plain {
            return Err(dm_err(format!("`{name}` is not a plain file name")));
        }
        Ok(())
    }

    /// Write `payload` to `path/name` on the machine and register it. An
    /// existing item at the same location is replaced.
    pub fn put_byte_data(&self, req: PutRequest, payload: &[u8]) -> Result<DataId, DataError> {
        Self::check_name(&req.name)?;
        let dir = self.resolve_dir(&req.machine_name, &req.path)?;
        let target = dir.join(&req.name);
        let mut st = self.lock();
        write_atomic(&target, payload)
            .map_err(|e| dm_err(format!("cannot write {} on {}: {e}", target.display(), req.machine_name)))?;
        let replaced: Vec<DataItem> = st
            .items
            .values()
            .filter(|i| i.machine_name == req.machine_name && i.file_path() == target)
            .cloned()
            .collect();
        for old in &replaced {
            st.items.remove(&old.data_id);
        }
        st.next += 1;
        let data_id = DataId::from_counter(st.next);
        st.items.insert(
            data_id.clone(),
            DataItem {
                data_id: data_id.clone(),
                name: req.name,
                machine_name: req.machine_name,
                path: dir,
                description: req.description,
                mime_type: req.mime_type,
                size_bytes: payload.len() as u64,
                incident_id: req.incident_id.clone(),
                created_at: Utc::now(),
            },
        );
        drop(st);
        for old in replaced {
            self.unlink(&old);
        }
        self.link(&req.incident_id, &data_id);
        Ok(data_id)
    }

    fn link(&self, incident: &IncidentId, data: &DataId) {
        if let Some(engine) = &self.engine {
            if let Err(e) = engine.link_data(incident, data) {
                warn!(%data, error = %e, "data item not linked to incident");
            }
        }
    }

    fn unlink(&self, item: &DataItem) {
        if let Some(engine) = &self.engine {
            if let Err(e) = engine.unlink_data(&item.incident_id, &item.data_id) {
                warn!(data = %item.data_id, error = %e, "data item not unlinked");
            }
        }
    }

    pub fn get_item(&self, id: &DataId) -> Result<DataItem, DataError> {
        self.lock()
            .items
            .get(id)
            .cloned()
            .ok_or_else(|| DataError::UnknownDataItem(id.clone()))
    }

    pub fn get_byte_data(&self, id: &DataId) -> Result<Vec<u8>, DataError> {
        let item = self.get_item(id)?;
        fs::read(item.file_path()).map_err(|e| dm_err(format!("cannot read {}: {e}", item.file_path().display())))
    }

    /// Copy to another location (possibly on another machine) as a new item.
    pub fn copy_data(&self, id: &DataId, dest_machine: &str, dest_path: &Path) -> Result<DataId, DataError> {
        let item = self.get_item(id)?;
        let bytes = self.get_byte_data(id)?;
        let req = PutRequest {
            incident_id: item.incident_id,
            name: item.name,
            machine_name: dest_machine.to_string(),
            description: item.description,
            mime_type: item.mime_type,
            path: dest_path.to_path_buf(),
        };
        self.put_byte_data(req, &bytes)
    }

    /// Rebind an item to another location, keeping its id.
    pub fn move_data(&self, id: &DataId, dest_machine: &str, dest_path: &Path) -> Result<(), DataError> {
        let item = self.get_item(id)?;
        let dir = self.resolve_dir(dest_machine, dest_path)?;
        let target = dir.join(&item.name);
        if target == item.file_path() {
            return Ok(());
        }
        let bytes = self.get_byte_data(id)?;
        let mut st = self.lock();
        write_atomic(&target, &bytes).map_err(|e| dm_err(format!("cannot write {}: {e}", target.display())))?;
        fs::remove_file(item.file_path())
            .map_err(|e| dm_err(format!("cannot remove {}: {e}", item.file_path().display())))?;
        let replaced: Vec<DataItem> = st
            .items
            .values()
            .filter(|i| i.data_id != *id && i.file_path() == target)
            .cloned()
            .collect();
        for old in &replaced {
            st.items.remove(&old.data_id);
        }
        let entry = st.items.get_mut(id).ok_or_else(|| DataError::UnknownDataItem(id.clone()))?;
        entry.machine_name = dest_machine.to_string();
        entry.path = dir;
        drop(st);
        for old in replaced {
            self.unlink(&old);
        }
        Ok(())
    }

    pub fn delete_data(&self, id: &DataId) -> Result<(), DataError> {
        let mut st = self.lock();
        let item = st
            .items
            .get(id)
            .cloned()
            .ok_or_else(|| DataError::UnknownDataItem(id.clone()))?;
        match fs::remove_file(item.file_path()) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(dm_err(format!("cannot delete {}: {e}", item.file_path().display()))),
        }
        st.items.remove(id);
        drop(st);
        self.unlink(&item);
        Ok(())
    }

    pub fn list_data(&self, incident: &IncidentId) -> Vec<DataItem> {
        self.lock()
            .items
            .values()
            .filter(|i| i.incident_id == *incident)
            .cloned()
            .collect()
    }

    pub fn items(&self) -> Vec<DataItem> {
        self.lock().items.values().cloned().collect()
    }
}

fn write_atomic(target: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = target.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(target).map_err(|e| e.error)?;
    Ok(())
}
