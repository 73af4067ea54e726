use std::fs;
use std::path::{Path, PathBuf};

use ofhrl::pipeline::sha256_file;

/// Relative path and SHA-256 of every file under `dir`, sorted by path.
pub fn tree_hashes(dir: &Path) -> Vec<(PathBuf, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), sha256_file(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Tree hashes without the files that record output locations.
pub fn output_hashes(dirs: &[PathBuf]) -> Vec<(PathBuf, String)> {
    let mut h: Vec<(PathBuf, String)> = dirs.iter().flat_map(|d| tree_hashes(d)).collect();
    // run.cfg and inputs.txt name the output directories, which differ by design
    h.retain(|(p, _)| {
        let name = p.file_name().unwrap().to_string_lossy();
        name != "run.cfg" && name != "inputs.txt"
    });
    h
}
