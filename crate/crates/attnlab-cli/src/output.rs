//! Artifact writers: versioned CSV, JSON payloads, the run manifest and the
//! parameter tensor container.
//!
//! Every CSV starts with a `# schema=<name>/<version> run=<id>` line followed
//! by a header row. The run id hashes the command, mode, config and seed, so
//! re-running the same manifest rewrites byte-identical payloads.

use crate::CliError;
use attnlab::attention_core::{AttentionParams, Head};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Short hex id of a run.
pub fn run_id(command: &str, mode: Option<&str>, config: &str, seed: u64) -> String {
    let mut h = Sha256::new();
    for part in [command, mode.unwrap_or("-"), config, &seed.to_string()] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Stable text form of a float (shortest round-trip).
pub fn num(x: f64) -> String {
    format!("{x}")
}

fn io(p: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", p.display()))
}

/// Writes artifacts of one run into `root/sub`; the manifest lives in `root`.
#[derive(Debug)]
pub struct Output {
    pub root: PathBuf,
    pub sub: String,
    pub run: String,
    /// Paths relative to `root`.
    pub written: Vec<String>,
}

impl Output {
    pub fn new(root: &Path, sub: &str, run: String) -> Result<Output, CliError> {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        Ok(Output { root: root.to_path_buf(), sub: sub.to_string(), run, written: Vec::new() })
    }

    pub fn dir(&self) -> PathBuf {
        self.root.join(&self.sub)
    }

    fn create(&mut self, name: &str) -> Result<(PathBuf, File), CliError> {
        let p = self.dir().join(name);
        let f = File::create(&p).map_err(io(&p))?;
        self.written.push(format!("{}/{name}", self.sub));
        Ok((p, f))
    }

    /// CSV with a schema line and a header row.
    pub fn csv<R>(&mut self, name: &str, schema: &str, header: &[&str], rows: R) -> Result<(), CliError>
    where
        R: IntoIterator<Item = Vec<String>>,
    {
        let (p, mut f) = self.create(name)?;
        writeln!(f, "# schema={schema} run={}", self.run).map_err(io(&p))?;
        let mut w = csv::Writer::from_writer(f);
        let csv_err = |e: csv::Error| CliError::Io(format!("{}: {e}", p.display()));
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            if r.len() != header.len() {
                return Err(CliError::Io(format!("{name}: row of {} fields under {} columns", r.len(), header.len())));
            }
            w.write_record(&r).map_err(csv_err)?;
        }
        w.flush().map_err(io(&p))?;
        Ok(())
    }

    /// JSON object `{schema, run, ...payload}`.
    pub fn json<T: Serialize>(&mut self, name: &str, schema: &str, payload: &T) -> Result<(), CliError> {
        let mut v = serde_json::json!({ "schema": schema, "run": self.run });
        let body = serde_json::to_value(payload).map_err(|e| CliError::Io(format!("{name}: {e}")))?;
        match body {
            serde_json::Value::Object(m) => v.as_object_mut().unwrap().extend(m),
            other => {
                v["data"] = other;
            }
        }
        let (p, mut f) = self.create(name)?;
        let text = serde_json::to_string_pretty(&v).expect("serializable");
        writeln!(f, "{text}").map_err(io(&p))
    }

    pub fn bytes(&mut self, name: &str, data: &[u8]) -> Result<(), CliError> {
        let (p, mut f) = self.create(name)?;
        f.write_all(data).map_err(io(&p))
    }

    /// Appends one manifest line naming everything written so far.
    pub fn manifest(&self, mut entry: RunManifest) -> Result<(), CliError> {
        entry.run = self.run.clone();
        entry.outputs = self.written.clone();
        let p = self.root.join(MANIFEST_FILE);
        let mut f = OpenOptions::new().create(true).append(true).open(&p).map_err(io(&p))?;
        let line = serde_json::to_string(&entry).expect("serializable");
        writeln!(f, "{line}").map_err(io(&p))
    }
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub run: String,
    pub command: String,
    pub mode: Option<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub threads: Option<usize>,
    pub version: String,
    pub modules: Vec<String>,
    pub wall_clock_s: f64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, mode: Option<&str>, config: serde_json::Value, seed: u64, threads: Option<usize>) -> Self {
        RunManifest {
            schema: "attnlab.manifest/1".into(),
            run: String::new(),
            command: command.into(),
            mode: mode.map(str::to_string),
            config,
            seed,
            threads,
            version: env!("CARGO_PKG_VERSION").into(),
            modules: [
                "data_model",
                "attention_core",
                "flow_engine",
                "spectral_engine",
                "moments_lab",
                "optimality_suite",
                "transfer_eval",
            ]
            .iter()
            .map(|m| format!("{m}@{}", env!("CARGO_PKG_VERSION")))
            .collect(),
            wall_clock_s: 0.0,
            outputs: Vec::new(),
        }
    }
}

/// Entry of the tensor container manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset in f64 elements.
    pub offset: usize,
}

/// Manifest of a parameter container: `<stem>.bin` holds little-endian f64
/// in column-major order, head by head, O, V, K, Q.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub schema: String,
    pub run: String,
    pub dtype: String,
    pub h: usize,
    pub d: usize,
    pub d_y: usize,
    pub d_e: usize,
    pub seed: u64,
    pub source: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_params(out: &mut Output, stem: &str, params: &AttentionParams, seed: u64, source: &str) -> Result<(), CliError> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (k, hd) in params.heads.iter().enumerate() {
        for (tag, m) in [("o", &hd.o), ("v", &hd.v), ("k", &hd.k), ("q", &hd.q)] {
            tensors.push(TensorEntry { name: format!("head{k}.{tag}"), rows: m.nrows(), cols: m.ncols(), offset });
            offset += m.len();
        }
    }
    let bytes: Vec<u8> = params.flat().iter().flat_map(|v| v.to_le_bytes()).collect();
    out.bytes(&format!("{stem}.bin"), &bytes)?;
    let man = TensorManifest {
        schema: "attnlab.tensor/1".into(),
        run: out.run.clone(),
        dtype: "f64-le".into(),
        h: params.h(),
        d: params.d,
        d_y: params.d_y,
        d_e: params.d_e,
        seed,
        source: source.into(),
        tensors,
    };
    let (p, mut f) = out.create(&format!("{stem}.json"))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&man).expect("serializable")).map_err(io(&p))
}

/// Reads a container written by [`save_params`]; `manifest` is the `.json` path.
pub fn load_params(manifest: &Path) -> Result<AttentionParams, CliError> {
    let text = fs::read_to_string(manifest).map_err(io(manifest))?;
    let man: TensorManifest =
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", manifest.display())))?;
    if man.dtype != "f64-le" {
        return Err(CliError::Io(format!("unsupported dtype {}", man.dtype)));
    }
    let bin = manifest.with_extension("bin");
    let raw = fs::read(&bin).map_err(io(&bin))?;
    if raw.len() % 8 != 0 {
        return Err(CliError::Io(format!("{}: truncated", bin.display())));
    }
    let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let take = |e: &TensorEntry| -> Result<DMatrix<f64>, CliError> {
        let end = e.offset + e.rows * e.cols;
        if end > vals.len() {
            return Err(CliError::Io(format!("tensor {} runs past the data", e.name)));
        }
        Ok(DMatrix::from_column_slice(e.rows, e.cols, &vals[e.offset..end]))
    };
    if man.tensors.len() != 4 * man.h {
        return Err(CliError::Io("tensor count does not match H".into()));
    }
    let mut heads = Vec::with_capacity(man.h);
    for c in man.tensors.chunks(4) {
        heads.push(Head { o: take(&c[0])?, v: take(&c[1])?, k: take(&c[2])?, q: take(&c[3])? });
    }
    let p = AttentionParams { d: man.d, d_y: man.d_y, d_e: man.d_e, heads };
    p.validate().map_err(|e| CliError::Io(format!("attention_core: {e}")))?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use attnlab::rng;

    #[test]
    fn run_id_depends_on_every_input() {
        let base = run_id("dynamics", Some("flow"), "{}", 1);
        assert_eq!(base.len(), 16);
        assert_eq!(base, run_id("dynamics", Some("flow"), "{}", 1));
        assert_ne!(base, run_id("dynamics", Some("spectral"), "{}", 1));
        assert_ne!(base, run_id("dynamics", Some("flow"), "{\"a\":1}", 1));
        assert_ne!(base, run_id("dynamics", Some("flow"), "{}", 2));
    }

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.0] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        let t = tempfile::tempdir().unwrap();
        let mut out = Output::new(t.path(), "x", "r".into()).unwrap();
        assert!(out.csv("a.csv", "s/1", &["a", "b"], vec![vec!["1".to_string()]]).is_err());
        out.csv("b.csv", "s/1", &["a", "b"], vec![vec!["1".into(), "2".into()]]).unwrap();
        let text = fs::read_to_string(t.path().join("x/b.csv")).unwrap();
        assert_eq!(text, "# schema=s/1 run=r\na,b\n1,2\n");
    }

    #[test]
    fn params_round_trip() {
        let t = tempfile::tempdir().unwrap();
        let mut out = Output::new(t.path(), "p", "r".into()).unwrap();
        let p = AttentionParams::random(3, 4, 2, 5, 1.0, &mut rng::stream(9, &[]));
        save_params(&mut out, "params", &p, 9, "test").unwrap();
        let back = load_params(&t.path().join("p/params.json")).unwrap();
        assert_eq!(back.flat(), p.flat());
        assert_eq!((back.h(), back.d, back.d_y, back.d_e), (3, 4, 2, 5));
        assert_eq!(out.written, vec!["p/params.bin".to_string(), "p/params.json".to_string()]);
    }

    #[test]
    fn manifest_appends_lines() {
        let t = tempfile::tempdir().unwrap();
        for k in 0..2 {
            let mut out = Output::new(t.path(), "c", format!("r{k}")).unwrap();
            out.json("c.json", "s/1", &serde_json::json!({ "k": k })).unwrap();
            out.manifest(RunManifest::new("check", None, serde_json::Value::Null, 0, None)).unwrap();
        }
        let text = fs::read_to_string(t.path().join(MANIFEST_FILE)).unwrap();
        let lines: Vec<RunManifest> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].run, "r1");
        assert_eq!(lines[1].outputs, vec!["c/c.json".to_string()]);
    }
}
