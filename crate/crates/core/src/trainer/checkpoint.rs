//! Binary checkpoint, little-endian throughout.
//!
//! ```text
//! magic "STDR" | version u32 | N u64 | K u64 | iteration u64 | seed u64
//! config: len u64 + TOML text
//! 6 × column (position, rotation, log_scale, color, opacity, mask):
//!     values: len u64 + f64s | adam: step u64, m, v (each len u64 + f64s)
//! knn: k u64 + len u64 + u64 indices
//! cached distribution: flag u8 [+ len u64 + f64s]
//! networks: count u64, then per block: name (len u64 + utf8),
//!     params, running stats, adam step u64, m, v
//! ```

use std::path::Path;

use super::{Config, TrainState, NETWORK_NAMES};
use crate::cloud::{CloudParams, Column, GaussianCloud, KnnTable, MaskDistribution};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STDR";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

fn bad(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        field,
        reason: reason.into(),
    }
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(bad(field, "truncated"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }
    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
    fn len(&mut self, field: &'static str, elem: usize) -> Result<usize> {
        let n = self.u64(field)?;
        let n = usize::try_from(n).map_err(|_| bad(field, "length overflows"))?;
        if n.checked_mul(elem).is_none_or(|b| b > self.data.len() - self.pos) {
            return Err(bad(field, format!("length {n} exceeds the remaining data")));
        }
        Ok(n)
    }
    fn f64s(&mut self, field: &'static str) -> Result<Vec<f64>> {
        let n = self.len(field, 8)?;
        let bytes = self.take(8 * n, field)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn f64s_exact(&mut self, field: &'static str, expected: usize) -> Result<Vec<f64>> {
        let v = self.f64s(field)?;
        if v.len() != expected {
            return Err(bad(field, format!("expected {expected} values, found {}", v.len())));
        }
        Ok(v)
    }
    fn str(&mut self, field: &'static str) -> Result<String> {
        let n = self.len(field, 1)?;
        let bytes = self.take(n, field)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| bad(field, "not UTF-8"))
    }
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(state.cloud.len() as u64);
    w.u64(state.k() as u64);
    w.u64(state.iteration);
    w.u64(state.seed);
    w.str(&state.config.to_toml_string()?);
    for (c, column) in Column::ALL.iter().enumerate() {
        w.f64s(state.cloud.params.column(*column));
        let a = &state.cloud_adam[c];
        w.u64(a.step);
        w.f64s(&a.m);
        w.f64s(&a.v);
    }
    w.u64(state.cloud.knn.k as u64);
    w.u64(state.cloud.knn.indices.len() as u64);
    for i in &state.cloud.knn.indices {
        w.u64(*i as u64);
    }
    match &state.cached {
        Some(d) => {
            w.u8(1);
            w.f64s(&d.probs);
        }
        None => w.u8(0),
    }
    w.u64(NETWORK_NAMES.len() as u64);
    for (i, name) in NETWORK_NAMES.iter().enumerate() {
        let net = state.network(i);
        w.str(name);
        w.f64s(net.params());
        w.f64s(&net.running_stats());
        let a = &state.net_adam[i];
        w.u64(a.step);
        w.f64s(&a.m);
        w.f64s(&a.v);
    }
    Ok(w.0)
}

pub fn decode(data: &[u8]) -> Result<TrainState> {
    let mut r = Reader { data, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(bad("magic", "not a checkpoint file"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(bad("version", format!("unsupported version {version}")));
    }
    let n = r.u64("n")? as usize;
    let k = r.u64("k")? as usize;
    if n == 0 {
        return Err(bad("n", "zero Gaussians"));
    }
    if k < 2 {
        return Err(bad("k", format!("K must be at least 2, got {k}")));
    }
    let iteration = r.u64("iteration")?;
    let seed = r.u64("seed")?;
    let config = Config::from_toml_str(&r.str("config")?).map_err(|e| bad("config", e.to_string()))?;
    if config.train.seed != seed {
        return Err(bad("seed", "header seed differs from the config"));
    }

    // The state is built from the config, then every learned value is overwritten.
    let mut params = CloudParams::zeros(n, k);
    let mut adam = Vec::new();
    for column in Column::ALL {
        let len = params.column(column).len();
        let v = r.f64s_exact(column.name(), len)?;
        params.column_mut(column).copy_from_slice(&v);
        let step = r.u64("adam")?;
        let m = r.f64s_exact("adam", len)?;
        let v = r.f64s_exact("adam", len)?;
        adam.push((step, m, v));
    }
    let knn_k = r.u64("knn")? as usize;
    let knn_len = r.len("knn", 8)?;
    let indices = (0..knn_len)
        .map(|_| r.u64("knn").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let knn = KnnTable { k: knn_k, indices };
    if !knn.is_empty() && (knn.k == 0 || knn.indices.len() != n * knn.k || knn.indices.iter().any(|&i| i >= n)) {
        return Err(bad("knn", "table does not match the cloud"));
    }
    let cached = match r.u8("cached")? {
        0 => None,
        1 => Some(MaskDistribution {
            k,
            probs: r.f64s_exact("cached", n * k)?,
        }),
        f => return Err(bad("cached", format!("invalid flag {f}"))),
    };

    let cloud = GaussianCloud {
        grads: CloudParams::zeros(n, k),
        params,
        knn,
    };
    cloud.params.validate().map_err(|e| bad("params", e.to_string()))?;
    let mut state = TrainState::with_cloud(config, cloud).map_err(|e| bad("config", e.to_string()))?;
    state.iteration = iteration;
    state.cached = cached;
    for (c, (step, m, v)) in adam.into_iter().enumerate() {
        let a = &mut state.cloud_adam[c];
        a.step = step;
        a.m = m;
        a.v = v;
    }

    let count = r.u64("networks")?;
    if count != NETWORK_NAMES.len() as u64 {
        return Err(bad(
            "networks",
            format!("expected {} blocks, found {count}", NETWORK_NAMES.len()),
        ));
    }
    for (i, name) in NETWORK_NAMES.iter().enumerate() {
        let found = r.str("networks")?;
        if found != *name {
            return Err(bad("networks", format!("expected block `{name}`, found `{found}`")));
        }
        let len = state.network(i).num_params();
        let p = r.f64s_exact("networks", len)?;
        let stats = r.f64s("networks")?;
        let step = r.u64("networks")?;
        let m = r.f64s_exact("networks", len)?;
        let v = r.f64s_exact("networks", len)?;
        let net = state.network_mut(i);
        net.set_params(&p).map_err(|e| bad("networks", e.to_string()))?;
        net.set_running_stats(&stats)
            .map_err(|e| bad("networks", e.to_string()))?;
        let a = &mut state.net_adam[i];
        a.step = step;
        a.m = m;
        a.v = v;
    }
    if r.pos != data.len() {
        return Err(bad(
            "trailer",
            format!("{} unexpected trailing bytes", data.len() - r.pos),
        ));
    }
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
