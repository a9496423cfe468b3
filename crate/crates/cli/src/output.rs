//! CSV and JSON writers. Numbers use Rust's shortest round-trip formatting, so
//! identical values give identical bytes; infinite barrier values print as `inf`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fracstefan::grid::{GridSpec, SpaceField, SpaceTimeField};
use fracstefan::stefan::BarrierFunction;
use serde::Serialize;

fn header(grid: &GridSpec, last: &str) -> String {
    if grid.dim() == 1 {
        format!("x,{last}\n")
    } else {
        format!("x,y,{last}\n")
    }
}

fn node_prefix(out: &mut String, p: [f64; 2], dim: usize) {
    if dim == 1 {
        let _ = write!(out, "{},", p[0]);
    } else {
        let _ = write!(out, "{},{},", p[0], p[1]);
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `x[,y],value` with one row per node.
pub fn field_csv(field: &SpaceField) -> String {
    let mut out = header(&field.grid, "value");
    for (p, v) in field.grid.nodes().zip(&field.values) {
        node_prefix(&mut out, p, field.grid.dim());
        let _ = writeln!(out, "{v}");
    }
    out
}

/// `x[,y],s`; nodes never reached by the barrier print `inf`.
pub fn barrier_csv(barrier: &BarrierFunction) -> String {
    let mut out = header(&barrier.grid, "s");
    for (p, v) in barrier.grid.nodes().zip(&barrier.values) {
        node_prefix(&mut out, p, barrier.grid.dim());
        let _ = writeln!(out, "{v}");
    }
    out
}

pub fn write_field(path: &Path, field: &SpaceField) -> Result<()> {
    write_file(path, &field_csv(field))
}

pub fn write_barrier(path: &Path, barrier: &BarrierFunction) -> Result<()> {
    write_file(path, &barrier_csv(barrier))
}

/// Evenly spread slice indices, first and last included.
pub fn snapshot_indices(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..count).map(|j| (j * (len - 1) + (count - 1) / 2) / (count - 1)).collect();
    idx.dedup();
    idx
}

/// Writes the chosen slices to `dir/slice_KKKKK.csv` plus `dir/index.csv` (`slice,t,file`).
pub fn write_stack(dir: &Path, stack: &SpaceTimeField, slices: &[usize]) -> Result<()> {
    let mut index = String::from("slice,t,file\n");
    for &k in slices {
        let name = format!("slice_{k:05}.csv");
        write_field(&dir.join(&name), stack.slice(k))?;
        let _ = writeln!(index, "{k},{},{name}", stack.time(k));
    }
    write_file(&dir.join("index.csv"), &index)
}

/// Two-column CSV with the given header.
pub fn write_columns(path: &Path, names: [&str; 2], rows: impl IntoIterator<Item = (f64, f64)>) -> Result<()> {
    let mut out = format!("{},{}\n", names[0], names[1]);
    for (a, b) in rows {
        let _ = writeln!(out, "{a},{b}");
    }
    write_file(path, &out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, &text)?;
    Ok(path.to_path_buf())
}
