//! Named parameter arrays and the single-file checkpoint container.

use crate::config::{ModelConfig, SpeakerHeadConfig};
use crate::error::{Error, Result};
use crate::kv::{self, Kv};
use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2, Ix3};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Named, shaped, seeded parameter arrays for one network.
///
/// Iteration order is the sorted name order, which makes hashing, container
/// serialization, and optimizer sweeps deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, ArrayD<f64>>,
    pub seed: u64,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            entries: BTreeMap::new(),
            seed,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.entries.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<f64>> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.entries.iter_mut()
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Store(format!("missing entry `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Store(format!("missing entry `{name}`")))
    }

    pub fn vec1(&self, name: &str) -> Result<ArrayView1<'_, f64>> {
        let a = self.get(name)?;
        a.view()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::shape(name, "1-d", format!("{:?}", a.shape())))
    }

    pub fn mat(&self, name: &str) -> Result<ArrayView2<'_, f64>> {
        let a = self.get(name)?;
        a.view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::shape(name, "2-d", format!("{:?}", a.shape())))
    }

    pub fn arr3(&self, name: &str) -> Result<ArrayView3<'_, f64>> {
        let a = self.get(name)?;
        a.view()
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::shape(name, "3-d", format!("{:?}", a.shape())))
    }

    pub fn vec1_mut(&mut self, name: &str) -> Result<ArrayViewMut1<'_, f64>> {
        let a = self.get_mut(name)?;
        let shape = a.shape().to_vec();
        a.view_mut()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::shape(name, "1-d", format!("{shape:?}")))
    }

    pub fn mat_mut(&mut self, name: &str) -> Result<ArrayViewMut2<'_, f64>> {
        let a = self.get_mut(name)?;
        let shape = a.shape().to_vec();
        a.view_mut()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::shape(name, "2-d", format!("{shape:?}")))
    }

    /// Names matching a prefix (dotted-path style).
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.entries.keys().filter(move |n| n.starts_with(prefix))
    }

    pub fn total_params(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    pub fn params_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, a)| a.len())
            .sum()
    }

    /// SHA-256 over sorted (name, shape, little-endian f64 payload) triples.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, arr) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in arr.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in arr.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

/// Gradient accumulator keyed by parameter name.
#[derive(Debug, Default)]
pub struct GradStore {
    entries: BTreeMap<String, ArrayD<f64>>,
}

impl GradStore {
    pub fn new() -> Self {
        GradStore::default()
    }

    /// Accumulate into the named slot; the first write fixes the shape.
    pub fn add(&mut self, name: &str, grad: ArrayD<f64>) {
        match self.entries.get_mut(name) {
            Some(acc) => {
                assert_eq!(acc.shape(), grad.shape(), "gradient shape changed for {name}");
                *acc += &grad;
            }
            None => {
                self.entries.insert(name.to_string(), grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// L2 norm over all entries whose name passes the filter.
    pub fn norm_where<F: Fn(&str) -> bool>(&self, pred: F) -> f64 {
        let mut s = 0.0;
        for (n, g) in &self.entries {
            if pred(n) {
                s += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        s.sqrt()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Which network a store describes; fixes the expected entry-name set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
    TunedTeacher,
    /// Full training state (parameters plus optimizer moments); not validated
    /// against a topology.
    TrainState,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
            Role::TunedTeacher => "tuned_teacher",
            Role::TrainState => "train_state",
        }
    }

    pub fn parse(s: &str) -> Result<Role> {
        match s {
            "teacher" => Ok(Role::Teacher),
            "student" => Ok(Role::Student),
            "tuned_teacher" => Ok(Role::TunedTeacher),
            "train_state" => Ok(Role::TrainState),
            other => Err(Error::Config(format!("unknown checkpoint role `{other}`"))),
        }
    }
}

/// Single-file archive: text manifest, then raw little-endian arrays in
/// manifest order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub role: Role,
    pub model: ModelConfig,
    pub head: Option<SpeakerHeadConfig>,
    /// Free-form metadata (epoch counters, provenance), kept ordered.
    pub meta: Vec<(String, String)>,
    pub store: ParameterStore,
}

const MAGIC: &str = "oskdft-ckpt-v1";

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path.display().to_string(), e);

        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        let mut pairs: Vec<(String, String)> = vec![
            ("role".into(), self.role.as_str().into()),
            ("seed".into(), self.store.seed.to_string()),
        ];
        pairs.extend(self.model.to_pairs("model."));
        if let Some(h) = &self.head {
            pairs.extend(h.to_pairs("head."));
        }
        for (k, v) in &self.meta {
            pairs.push((format!("meta.{k}"), v.clone()));
        }
        header.push_str(&kv::render(&pairs));

        let mut nbytes: u64 = 0;
        for (name, arr) in self.store.iter() {
            let dims = arr
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            header.push_str(&format!("tensor {name} f64 {dims}\n"));
            nbytes += (arr.len() * 8) as u64;
        }
        header.push_str(&format!("data {nbytes}\n"));
        w.write_all(header.as_bytes()).map_err(io_err)?;

        for (_, arr) in self.store.iter() {
            // standard-layout iteration matches the declared shape order
            for v in arr.iter() {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = BufReader::new(file);
        let io_err = |e| Error::io(path.display().to_string(), e);

        let mut magic = String::new();
        r.read_line(&mut magic).map_err(io_err)?;
        if magic.trim_end() != MAGIC {
            return Err(Error::Parse {
                line: 1,
                msg: format!("bad checkpoint magic in {}", path.display()),
            });
        }

        let mut kv_lines = String::new();
        let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
        let mut line_no = 1;
        let declared_bytes: u64 = loop {
            let mut line = String::new();
            let n = r.read_line(&mut line).map_err(io_err)?;
            line_no += 1;
            if n == 0 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "unexpected EOF before data section".into(),
                });
            }
            let t = line.trim_end();
            if let Some(rest) = t.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 || parts[1] != "f64" {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("bad tensor line `{t}`"),
                    });
                }
                let shape: Vec<usize> = parts[2]
                    .split('x')
                    .map(|s| {
                        s.parse::<usize>().map_err(|_| Error::Parse {
                            line: line_no,
                            msg: format!("bad shape `{}`", parts[2]),
                        })
                    })
                    .collect::<Result<_>>()?;
                tensors.push((parts[0].to_string(), shape));
            } else if let Some(rest) = t.strip_prefix("data ") {
                break rest.parse::<u64>().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("bad data size `{rest}`"),
                })?;
            } else {
                kv_lines.push_str(t);
                kv_lines.push('\n');
            }
        };

        let kv = Kv::parse(&kv_lines)?;
        let role = Role::parse(&kv.get_str("role")?)?;
        let seed: u64 = kv.get("seed", "u64")?;
        let model = ModelConfig::from_kv(&kv, "model.")?;
        let head = if kv.contains("head.kind") {
            Some(SpeakerHeadConfig::from_kv(&kv, "head.")?)
        } else {
            None
        };
        let mut meta = Vec::new();
        // opt_str marks meta keys consumed so finish() only flags true strangers
        for key in ["epoch", "step", "source", "label"] {
            if let Some(v) = kv.opt_str(&format!("meta.{key}")) {
                meta.push((key.to_string(), v));
            }
        }
        kv.finish()?;

        let mut store = ParameterStore::new(seed);
        let mut total: u64 = 0;
        for (name, shape) in &tensors {
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf).map_err(io_err)?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            total += (n * 8) as u64;
            let arr = ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).map_err(|_| {
                Error::shape(name, format!("{shape:?}"), "bad payload length")
            })?;
            store.insert(name.clone(), arr);
        }
        if total != declared_bytes {
            return Err(Error::Store(format!(
                "data section size mismatch: declared {declared_bytes}, read {total}"
            )));
        }
        Ok(Checkpoint {
            role,
            model,
            head,
            meta,
            store,
        })
    }

    pub fn meta_u64(&self, key: &str) -> Option<u64> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .and_then(|(_, v)| v.parse().ok())
    }
}
