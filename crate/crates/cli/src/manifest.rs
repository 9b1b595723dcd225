//! Run directories and their manifests.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.txt";

/// Artifact root: `$DWD_DATA_DIR`, or `dwd-data` in the working directory.
pub fn data_root() -> PathBuf {
    std::env::var_os("DWD_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("dwd-data"))
}

/// Fresh `<parent>/<timestamp>-seed<seed>` directory; a numeric suffix
/// avoids collisions within the same second.
pub fn create_run_dir(parent: &Path, seed: u64) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    for n in 0.. {
        let name = match n {
            0 => format!("{stamp}-seed{seed}"),
            n => format!("{stamp}-seed{seed}-{n}"),
        };
        let dir = parent.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// `key = value` lines: the command, its arguments, the resolved config and
/// sha-256 hashes of inputs (`input.*`) and outputs (`sha256.*`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Manifest {
        let mut m = Manifest::default();
        m.set("command", command);
        m.set("argv", &std::env::args().collect::<Vec<_>>().join(" "));
        m.set("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn set(&mut self, key: &str, value: &str) {
        let value = value.replace('\n', " ");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Prefixes each line of a flat config with `config.`.
    pub fn set_config(&mut self, flat: &str) {
        for line in flat.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.set(&format!("config.{}", k.trim()), v.trim());
            }
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.set(&format!("input.{name}"), &path.display().to_string());
        self.set(&format!("input.{name}.sha256"), &sha256_file(path)?);
        Ok(())
    }

    /// Hashes every file in `dir` except the manifest itself.
    pub fn hash_outputs(&mut self, dir: &Path) -> Result<()> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST))
            .collect();
        files.sort();
        for f in files {
            let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            self.set(&format!("sha256.{name}"), &sha256_file(&f)?);
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut m = Manifest::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once(" = ").ok_or_else(|| anyhow!("bad manifest line {line:?}"))?;
            m.entries.push((k.to_string(), v.to_string()));
        }
        Ok(m)
    }

    /// Hashes the run directory's outputs and writes the manifest into it.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.hash_outputs(dir)?;
        let path = dir.join(MANIFEST);
        fs::write(&path, self.render()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_hashes_outputs_and_parses_back() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), b"abc").unwrap();
        let mut m = Manifest::new("test");
        m.set_config("seed = 7\nepochs = 2\n");
        let path = m.finish(dir.path()).unwrap();
        let back = Manifest::parse(&fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(back.get("config.seed"), Some("7"));
        assert_eq!(
            back.get("sha256.a.txt"),
            Some("ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad")
        );
    }

    #[test]
    fn run_dirs_do_not_collide() {
        let dir = tempfile::tempdir().unwrap();
        let a = create_run_dir(dir.path(), 7).unwrap();
        let b = create_run_dir(dir.path(), 7).unwrap();
        assert_ne!(a, b);
        assert!(a.file_name().unwrap().to_str().unwrap().contains("seed7"));
    }
}
