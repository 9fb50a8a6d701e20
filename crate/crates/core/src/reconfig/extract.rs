use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Result, UcpError};
use crate::partition::{read_manifest, ShardEntry, MANIFEST_FILE};
use crate::tensor::{read_tensor, Tensor};

/// A parameter fragment in flight from a mapper to its reducer. Carries all
/// layout information needed to place it; no manifest lookups downstream.
#[derive(Debug, Clone)]
pub struct FragmentMsg {
    pub rank: u32,
    pub entry: ShardEntry,
    pub tensor: Tensor,
}

/// Streams every fragment of one rank directory to `sink`, checking that the
/// manifest and the files on disk match one-to-one.
pub fn extract_each(rank_dir: &Path, mut sink: impl FnMut(FragmentMsg) -> Result<()>) -> Result<u64> {
    let manifest = read_manifest(rank_dir)?;
    let manifest_err = |reason: String| UcpError::Manifest {
        path: rank_dir.join(MANIFEST_FILE),
        reason,
    };

    let mut listed = BTreeSet::new();
    let mut keys = BTreeSet::new();
    for e in &manifest.shards {
        if !listed.insert(e.file.as_str()) {
            return Err(manifest_err(format!("file {} listed twice", e.file)));
        }
        if !keys.insert((e.param.as_str(), e.kind)) {
            return Err(manifest_err(format!("`{}`/{} listed twice", e.param, e.kind)));
        }
        if e.placement != manifest.placement {
            return Err(manifest_err(format!("`{}` placement differs from the rank's", e.param)));
        }
    }
    let on_disk: BTreeSet<String> = std::fs::read_dir(rank_dir)
        .map_err(|e| UcpError::io(rank_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST_FILE)
        .collect();
    let on_disk_refs: BTreeSet<&str> = on_disk.iter().map(String::as_str).collect();
    if on_disk_refs != listed {
        let missing: Vec<_> = listed.difference(&on_disk_refs).collect();
        let extra: Vec<_> = on_disk_refs.difference(&listed).collect();
        return Err(manifest_err(format!("files do not match manifest: missing {missing:?}, unlisted {extra:?}")));
    }

    let mut bytes = 0;
    for entry in manifest.shards {
        let path = rank_dir.join(&entry.file);
        let tensor = read_tensor(&path).map_err(|e| e.in_param(&entry.param))?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(manifest_err(format!(
                "{} has shape {:?}, manifest says {:?}",
                entry.file,
                tensor.shape(),
                entry.shape
            )));
        }
        bytes += tensor.nbytes() as u64;
        sink(FragmentMsg {
            rank: manifest.rank,
            entry,
            tensor,
        })?;
    }
    Ok(bytes)
}

/// All fragments of one rank directory.
pub fn extract(rank_dir: &Path) -> Result<Vec<FragmentMsg>> {
    let mut out = Vec::new();
    extract_each(rank_dir, |m| {
        out.push(m);
        Ok(())
    })?;
    Ok(out)
}
