//! File formats: canonical-table cache, sample batches (CSV and a compact
//! binary run file), trajectories and snapshots.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::configuration::Configuration;
use crate::dynamics::{Event, Trajectory};
use crate::error::{Error, Result};
use crate::exact::CanonicalTable;
use crate::model::ModelParams;
use crate::sampling::SampleBatch;

const TABLE_MAGIC: &[u8; 8] = b"ZRPTABLE";
const TABLE_VERSION: u32 = 1;
const RUN_MAGIC: &[u8; 8] = b"ZRPRUN\0\0";
const RUN_VERSION: u32 = 1;
const CSV_TAG: &str = "zrp-samples v1";
const TRAJECTORY_TAG: &str = "zrp-trajectory v1";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn param_words(p: &ModelParams) -> (u8, f64, f64) {
    match *p {
        ModelParams::PowerLaw { b } => (0, b, 0.0),
        ModelParams::Stretched { beta, lambda } => (1, beta, lambda),
    }
}

/// Cache file name for the key `(family, parameters, L, N)`; parameters
/// enter through their exact bit patterns.
pub fn table_cache_name(params: &ModelParams, l: usize, n: usize) -> String {
    let (_, a, b) = param_words(params);
    format!(
        "{}-{:016x}-{:016x}-L{l}-N{n}.zrpt",
        params.family_name(),
        a.to_bits(),
        b.to_bits()
    )
}

/// Writes `ln Q_l(n)` for all `l, n` as little-endian `f64` with a header
/// and a trailing SHA-256 of everything before it.
pub fn write_table(path: &Path, table: &CanonicalTable) -> Result<()> {
    let (family, a, b) = param_words(table.params());
    let mut buf = Vec::with_capacity(48 + table.sites() * (table.particles() + 1) * 8 + 32);
    buf.extend_from_slice(TABLE_MAGIC);
    buf.extend_from_slice(&TABLE_VERSION.to_le_bytes());
    buf.push(family);
    buf.extend_from_slice(&a.to_le_bytes());
    buf.extend_from_slice(&b.to_le_bytes());
    buf.extend_from_slice(&(table.sites() as u64).to_le_bytes());
    buf.extend_from_slice(&(table.particles() as u64).to_le_bytes());
    for row in table.rows() {
        for x in row {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    let tmp = path.with_extension("zrpt.tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(format_err("truncated file"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

fn split_digest(data: &[u8]) -> Result<&[u8]> {
    if data.len() < 32 {
        return Err(format_err("file too short"));
    }
    let (body, digest) = data.split_at(data.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(format_err("checksum mismatch"));
    }
    Ok(body)
}

pub fn read_table(path: &Path) -> Result<CanonicalTable> {
    let data = fs::read(path)?;
    let body = split_digest(&data)?;
    let mut c = Cursor { data: body, pos: 0 };
    if c.take(8)? != TABLE_MAGIC {
        return Err(format_err("not a canonical table cache"));
    }
    let v = c.u32()?;
    if v != TABLE_VERSION {
        return Err(format_err(format!("table cache version {v}, expected {TABLE_VERSION}")));
    }
    let params = match c.u8()? {
        0 => {
            let b = c.f64()?;
            c.f64()?;
            ModelParams::power_law(b)?
        }
        1 => ModelParams::stretched(c.f64()?, c.f64()?)?,
        f => return Err(format_err(format!("unknown family tag {f}"))),
    };
    let l = c.u64()? as usize;
    let n = c.u64()? as usize;
    if body.len() != c.pos + l * (n + 1) * 8 {
        return Err(format_err("table size does not match its header"));
    }
    let mut rows = Vec::with_capacity(l);
    for _ in 0..l {
        rows.push((0..=n).map(|_| c.f64()).collect::<Result<Vec<f64>>>()?);
    }
    CanonicalTable::from_rows(params, rows)
}

/// Reads the cached table for the key if present and valid, otherwise
/// builds and stores it. Returns the table and whether the cache was hit.
pub fn load_or_build_table(dir: &Path, params: ModelParams, l: usize, n: usize) -> Result<(CanonicalTable, bool)> {
    let path = dir.join(table_cache_name(&params, l, n));
    if path.exists() {
        if let Ok(t) = read_table(&path) {
            if *t.params() == params && t.sites() == l && t.particles() == n {
                return Ok((t, true));
            }
        }
    }
    let t = CanonicalTable::build(params, l, n)?;
    fs::create_dir_all(dir)?;
    write_table(&path, &t)?;
    Ok((t, false))
}

/// Git-style content hash: SHA-256 of `"blob <len>\0" ++ body`.
pub fn content_hash(body: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(body);
    hex::encode(h.finalize())
}

/// Metadata common to the sample formats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchHeader {
    pub params: ModelParams,
    pub sites: usize,
    pub particles: Option<usize>,
    pub seed: u64,
    pub sampler: String,
    pub count: usize,
}

impl BatchHeader {
    fn of(batch: &SampleBatch) -> Self {
        BatchHeader {
            params: batch.params,
            sites: batch.sites,
            particles: batch.particles,
            seed: batch.seed,
            sampler: batch.sampler.clone(),
            count: batch.configs.len(),
        }
    }
}

fn csv_body(configs: &[Configuration]) -> String {
    let mut body = String::new();
    for c in configs {
        let row: Vec<String> = c.as_slice().iter().map(u64::to_string).collect();
        body.push_str(&row.join(","));
        body.push('\n');
    }
    body
}

/// One configuration per row after a `#` header carrying the metadata and
/// the content hash of the rows.
pub fn write_samples_csv<W: Write>(mut w: W, batch: &SampleBatch) -> Result<()> {
    let body = csv_body(&batch.configs);
    let h = BatchHeader::of(batch);
    writeln!(w, "# {CSV_TAG}")?;
    writeln!(w, "# family={}", h.params.family_name())?;
    writeln!(w, "# params={}", serde_json::to_string(&h.params)?)?;
    writeln!(w, "# L={}", h.sites)?;
    match h.particles {
        Some(n) => writeln!(w, "# N={n}")?,
        None => writeln!(w, "# N=free")?,
    }
    writeln!(w, "# seed={}", h.seed)?;
    writeln!(w, "# sampler={}", h.sampler)?;
    writeln!(w, "# count={}", h.count)?;
    writeln!(w, "# hash={}", content_hash(body.as_bytes()))?;
    w.write_all(body.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn header_map(lines: &[String]) -> std::collections::HashMap<String, String> {
    lines
        .iter()
        .filter_map(|l| l.strip_prefix("# "))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn get<'a>(m: &'a std::collections::HashMap<String, String>, k: &str) -> Result<&'a str> {
    m.get(k).map(String::as_str).ok_or_else(|| format_err(format!("missing header field {k}")))
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| format_err(format!("bad {what}: {s}")))
}

fn parse_row(line: &str) -> Result<Vec<u64>> {
    line.split(',').map(|x| parse(x, "occupation number")).collect()
}

/// Parses and verifies a sample CSV: hash, row count, row length and,
/// for canonical batches, the particle number of every row.
pub fn read_samples_csv<R: Read>(r: R) -> Result<SampleBatch> {
    let mut header = Vec::new();
    let mut body = String::new();
    for line in BufReader::new(r).lines() {
        let line = line?;
        if line.starts_with('#') {
            header.push(line);
        } else if !line.is_empty() {
            body.push_str(&line);
            body.push('\n');
        }
    }
    if header.first().map(String::as_str) != Some(&format!("# {CSV_TAG}")) {
        return Err(format_err("not a sample CSV"));
    }
    let m = header_map(&header);
    if get(&m, "hash")? != content_hash(body.as_bytes()) {
        return Err(format_err("content hash mismatch"));
    }
    let params: ModelParams = serde_json::from_str(get(&m, "params")?)?;
    params.validate()?;
    let sites: usize = parse(get(&m, "L")?, "L")?;
    let particles = match get(&m, "N")? {
        "free" => None,
        s => Some(parse(s, "N")?),
    };
    let configs = body
        .lines()
        .map(|l| Configuration::new(parse_row(l)?))
        .collect::<Result<Vec<_>>>()?;
    let batch = SampleBatch {
        params,
        sites,
        particles,
        seed: parse(get(&m, "seed")?, "seed")?,
        sampler: get(&m, "sampler")?.to_string(),
        configs,
    };
    check_batch(&batch, parse(get(&m, "count")?, "count")?)?;
    Ok(batch)
}

fn check_batch(batch: &SampleBatch, count: usize) -> Result<()> {
    if batch.configs.len() != count {
        return Err(format_err(format!("expected {count} rows, found {}", batch.configs.len())));
    }
    for c in &batch.configs {
        if c.len() != batch.sites {
            return Err(format_err(format!("row of length {} in an L={} batch", c.len(), batch.sites)));
        }
        if let Some(n) = batch.particles {
            if c.total() != n as u64 {
                return Err(format_err(format!("row sums to {}, expected {n}", c.total())));
            }
        }
    }
    Ok(())
}

/// Magic, version, length-prefixed JSON header, LEB128 occupation numbers
/// and a trailing SHA-256.
pub fn write_samples_binary<W: Write>(mut w: W, batch: &SampleBatch) -> Result<()> {
    let header = serde_json::to_vec(&BatchHeader::of(batch))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(RUN_MAGIC);
    buf.extend_from_slice(&RUN_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for c in &batch.configs {
        for &x in c.as_slice() {
            leb128::write::unsigned(&mut buf, x)?;
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_samples_binary<R: Read>(mut r: R) -> Result<SampleBatch> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let body = split_digest(&data)?;
    let mut c = Cursor { data: body, pos: 0 };
    if c.take(8)? != RUN_MAGIC {
        return Err(format_err("not a binary run file"));
    }
    let v = c.u32()?;
    if v != RUN_VERSION {
        return Err(format_err(format!("run file version {v}, expected {RUN_VERSION}")));
    }
    let hlen = c.u32()? as usize;
    let header: BatchHeader = serde_json::from_slice(c.take(hlen)?)?;
    header.params.validate()?;
    let mut rest = &body[c.pos..];
    let mut configs = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let row = (0..header.sites)
            .map(|_| leb128::read::unsigned(&mut rest).map_err(|e| format_err(format!("bad varint: {e}"))))
            .collect::<Result<Vec<u64>>>()?;
        configs.push(Configuration::new(row)?);
    }
    if !rest.is_empty() {
        return Err(format_err("trailing bytes after the last configuration"));
    }
    let batch = SampleBatch {
        params: header.params,
        sites: header.sites,
        particles: header.particles,
        seed: header.seed,
        sampler: header.sampler,
        configs,
    };
    check_batch(&batch, header.count)?;
    Ok(batch)
}

/// Event log: metadata and the initial configuration in the header, then
/// `time,from,to` rows with 0-based sites.
pub fn write_trajectory_csv<W: Write>(
    w: W,
    traj: &Trajectory,
    params: &ModelParams,
    kernel: &str,
    seed: u64,
) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "# {TRAJECTORY_TAG}")?;
    writeln!(w, "# params={}", serde_json::to_string(params)?)?;
    writeln!(w, "# kernel={kernel}")?;
    writeln!(w, "# seed={seed}")?;
    writeln!(w, "# t_end={}", traj.t_end)?;
    let init: Vec<String> = traj.initial.as_slice().iter().map(u64::to_string).collect();
    writeln!(w, "# initial={}", init.join(","))?;
    writeln!(w, "time,from,to")?;
    for e in &traj.events {
        writeln!(w, "{},{},{}", e.time, e.from, e.to)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an event log and replays it to recover the final state.
pub fn read_trajectory_csv<R: Read>(r: R) -> Result<(Trajectory, ModelParams)> {
    let mut header = Vec::new();
    let mut events = Vec::new();
    for line in BufReader::new(r).lines() {
        let line = line?;
        if line.starts_with('#') {
            header.push(line);
        } else if line.is_empty() || line == "time,from,to" {
            continue;
        } else {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(format_err(format!("bad event row: {line}")));
            }
            events.push(Event {
                time: parse(f[0], "time")?,
                from: parse(f[1], "site")?,
                to: parse(f[2], "site")?,
            });
        }
    }
    if header.first().map(String::as_str) != Some(&format!("# {TRAJECTORY_TAG}")) {
        return Err(format_err("not a trajectory CSV"));
    }
    let m = header_map(&header);
    let params: ModelParams = serde_json::from_str(get(&m, "params")?)?;
    let initial = Configuration::new(parse_row(get(&m, "initial")?)?)?;
    let mut traj = Trajectory {
        final_state: initial.clone(),
        initial,
        events,
        t_end: parse(get(&m, "t_end")?, "t_end")?,
    };
    traj.final_state = traj.replay()?;
    Ok((traj, params))
}

/// `time,x0,x1,…` rows for states on a time grid.
pub fn write_snapshots_csv<W: Write>(w: W, times: &[f64], states: &[Configuration]) -> Result<()> {
    if times.len() != states.len() {
        return Err(format_err("one time per snapshot required"));
    }
    let mut w = BufWriter::new(w);
    let l = states.first().map(Configuration::len).unwrap_or(0);
    let cols: Vec<String> = (0..l).map(|x| format!("x{x}")).collect();
    writeln!(w, "time,{}", cols.join(","))?;
    for (t, s) in times.iter().zip(states) {
        let row: Vec<String> = s.as_slice().iter().map(u64::to_string).collect();
        writeln!(w, "{t},{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes to `path` through a buffered file handle.
pub fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

pub fn open(path: &Path) -> Result<fs::File> {
    Ok(fs::File::open(path)?)
}

/// `dir/name`, or `name` when no directory is given.
pub fn in_dir(dir: Option<&Path>, name: &str) -> PathBuf {
    dir.map(|d| d.join(name)).unwrap_or_else(|| PathBuf::from(name))
}
