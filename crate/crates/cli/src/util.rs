//! Output staging and dictionary-directory loading.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sparkv_core::dict::{DictRole, Dictionary};

use crate::CliError;

/// Writes staged to `<path>.tmp` and renamed into place on commit, so a
/// failed command never leaves partial outputs.
pub struct StagedWrites {
    staged: Vec<(PathBuf, PathBuf)>,
}

impl StagedWrites {
    pub fn new() -> Self {
        Self { staged: Vec::new() }
    }

    /// Stage one output file; `write` receives the temporary file.
    pub fn stage(
        &mut self,
        path: &Path,
        write: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> Result<(), CliError>,
    ) -> Result<(), CliError> {
        let tmp = temp_sibling(path);
        let file = std::fs::File::create(&tmp)
            .map_err(|e| CliError::Data(format!("create {}: {e}", tmp.display())))?;
        let mut w = std::io::BufWriter::new(file);
        write(&mut w)?;
        use std::io::Write;
        w.flush()
            .map_err(|e| CliError::Data(format!("write {}: {e}", tmp.display())))?;
        self.staged.push((tmp, path.to_path_buf()));
        Ok(())
    }

    /// Rename every staged file into place.
    pub fn commit(self) -> Result<(), CliError> {
        for (tmp, path) in &self.staged {
            std::fs::rename(tmp, path)
                .map_err(|e| CliError::Data(format!("rename to {}: {e}", path.display())))?;
        }
        Ok(())
    }
}

impl Drop for StagedWrites {
    fn drop(&mut self) {
        for (tmp, _) in &self.staged {
            let _ = std::fs::remove_file(tmp);
        }
    }
}

impl Default for StagedWrites {
    fn default() -> Self {
        Self::new()
    }
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Canonical dictionary file name inside a dictionary directory.
pub fn dict_file_name(layer: u16, role: DictRole) -> String {
    format!("dict_l{layer:03}_{}.lxdc", role.label())
}

/// Training-report file name next to a dictionary.
pub fn report_file_name(layer: u16, role: DictRole) -> String {
    format!("train_l{layer:03}_{}.csv", role.label())
}

/// Load every `.lxdc` file in a directory, keyed by the (layer, role)
/// recorded in the file header.
pub fn load_dict_dir(dir: &Path) -> Result<BTreeMap<(u16, u8), Dictionary>, CliError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("read dictionary dir {}: {e}", dir.display())))?;
    let mut dicts = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Data(e.to_string()))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("lxdc") {
            continue;
        }
        let dict = Dictionary::load(&path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let key = (dict.layer_id(), dict.role().code());
        if dicts.insert(key, dict).is_some() {
            return Err(CliError::Data(format!(
                "duplicate dictionary for layer {} role {} in {}",
                key.0,
                key.1,
                dir.display()
            )));
        }
    }
    if dicts.is_empty() {
        return Err(CliError::Data(format!(
            "no .lxdc dictionaries found in {}",
            dir.display()
        )));
    }
    Ok(dicts)
}

/// Fetch the dictionary for one (layer, role) or fail with a clear message.
pub fn require_dict(
    dicts: &BTreeMap<(u16, u8), Dictionary>,
    layer: u16,
    role: DictRole,
) -> Result<&Dictionary, CliError> {
    dicts.get(&(layer, role.code())).ok_or_else(|| {
        CliError::Data(format!(
            "missing dictionary for layer {layer} role {}",
            role.label()
        ))
    })
}
