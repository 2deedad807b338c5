#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

pub const BIN: &str = env!("CARGO_BIN_EXE_histopair");

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

fn finish(out: Output) -> Run {
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Run the binary in `dir` with `args`.
pub fn histopair(dir: &Path, args: &[&str]) -> Run {
    finish(Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs"))
}

/// A workspace with synthetic slides and a config pointing at them.
pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new(slides: usize, side: u32) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let r = histopair(dir.path(), &["synth", "--out", "data", "--slides", &slides.to_string(), "--side", &side.to_string()]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        std::fs::write(
            dir.path().join("config.toml"),
            "[paths]\nmanifest = \"data/manifest.jsonl\"\nembeddings_dir = \"data/embeddings\"\noutput_dir = \"out\"\n",
        )
        .unwrap();
        Self { dir }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn out(&self) -> PathBuf {
        self.path().join("out")
    }

    /// Run with `--config config.toml` prepended.
    pub fn run(&self, args: &[&str]) -> Run {
        let mut all = vec!["--config", "config.toml"];
        all.extend_from_slice(args);
        histopair(self.path(), &all)
    }

    /// Like [`run`] with output redirected to `out_dir`.
    pub fn run_into(&self, out_dir: &str, args: &[&str]) -> Run {
        let set = format!("paths.output_dir=\"{out_dir}\"");
        let mut all = vec!["--set", set.as_str()];
        all.extend_from_slice(args);
        self.run(&all)
    }
}

/// A running `mock-serve`; killed on drop.
pub struct Server {
    child: Child,
    pub url: String,
}

impl Server {
    pub fn start(extra: &[&str]) -> Self {
        let mut child = Command::new(BIN)
            .args(["mock-serve", "--port", "0"])
            .args(extra)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("server spawns");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let url = line.trim().strip_prefix("listening on ").expect("listen line").to_string();
        Self { child, url }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Every file under `dir`, relative path and contents, sorted.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
