//! Attention-map export: class-token attention over the stage grid,
//! upsampled by nearest neighbour to the input clip and written as binary
//! PGM frames with a JSON sidecar holding the normalization constants.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::AttnRecord;
use crate::{Error, Result};

/// Nearest-neighbour resampling of a `grid`-shaped volume to `out`.
pub fn upsample_nearest(map: &[f64], grid: [usize; 3], out: [usize; 3]) -> Result<Vec<f64>> {
    if map.len() != grid.iter().product::<usize>() || grid.contains(&0) || out.contains(&0) {
        return Err(Error::contract(format!(
            "map of {} values does not fit grid {grid:?} -> {out:?}",
            map.len()
        )));
    }
    let src = |o: usize, g: usize, n: usize| o * g / n;
    let mut v = Vec::with_capacity(out.iter().product());
    for t in 0..out[0] {
        for y in 0..out[1] {
            for x in 0..out[2] {
                let (st, sy, sx) = (src(t, grid[0], out[0]), src(y, grid[1], out[1]), src(x, grid[2], out[2]));
                v.push(map[(st * grid[1] + sy) * grid[2] + sx]);
            }
        }
    }
    Ok(v)
}

/// Min-max scaling to `0..=255`. A constant map becomes all zeros.
pub fn quantize(values: &[f64]) -> (Vec<u8>, f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let q = values
        .iter()
        .map(|&v| if span > 0.0 { ((v - min) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    (q, min, max)
}

pub fn dequantize(q: &[u8], min: f64, max: f64) -> Vec<f64> {
    q.iter().map(|&b| min + f64::from(b) / 255.0 * (max - min)).collect()
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::contract(format!("{} pixels for {width}x{height}", pixels.len())));
    }
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf)?;
    Ok(())
}

/// `(width, height, pixels)` of a binary PGM with maxval 255.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|_| Error::Missing(path.to_path_buf()))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad header field `{s}`")));
    if fields[0] != "P5" || num(&fields[3])? != 255 {
        return Err(Error::format(path, "expected P5 with maxval 255"));
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| Error::format(path, "truncated PGM data"))?;
    Ok((w, h, data.to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub name: String,
    /// `None` for the aggregate map.
    pub stage: Option<usize>,
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub grid: [usize; 3],
    /// Output volume `[T, H, W]`; one PGM per frame.
    pub size: [usize; 3],
    pub min: f64,
    pub max: f64,
    pub frames: Vec<String>,
}

/// Attention from the class token to every patch key, laid out on `kv_grid`.
pub fn class_token_map(r: &AttnRecord) -> Vec<f64> {
    let (_, lk) = r.probs.dims2();
    r.probs.row(0)[1..lk].to_vec()
}

fn write_map(dir: &Path, name: &str, map: &[f64], grid: [usize; 3], size: [usize; 3]) -> Result<MapSidecar> {
    let up = upsample_nearest(map, grid, size)?;
    let (q, min, max) = quantize(&up);
    let plane = size[1] * size[2];
    let mut frames = Vec::with_capacity(size[0]);
    for (f, px) in q.chunks(plane).enumerate() {
        let file = format!("{name}_f{f:02}.pgm");
        write_pgm(&dir.join(&file), size[2], size[1], px)?;
        frames.push(file);
    }
    Ok(MapSidecar {
        name: name.to_string(),
        stage: None,
        layer: None,
        head: None,
        grid,
        size,
        min,
        max,
        frames,
    })
}

/// Write one map per recorded head plus the mean over heads of the final
/// layer. Returns the sidecars, also written as `<name>.json`.
pub fn export_maps(records: &[AttnRecord], size: [usize; 3], dir: &Path) -> Result<Vec<MapSidecar>> {
    let last = records
        .iter()
        .map(|r| (r.stage, r.layer))
        .max()
        .ok_or_else(|| Error::contract("no attention records to export"))?;
    fs::create_dir_all(dir)?;
    let mut out = Vec::with_capacity(records.len() + 1);
    for r in records {
        let name = format!("s{}_l{}_h{}", r.stage, r.layer, r.head);
        let mut sc = write_map(dir, &name, &class_token_map(r), r.kv_grid, size)?;
        sc.stage = Some(r.stage);
        sc.layer = Some(r.layer);
        sc.head = Some(r.head);
        out.push(sc);
    }
    let finals: Vec<&AttnRecord> = records.iter().filter(|r| (r.stage, r.layer) == last).collect();
    let grid = finals[0].kv_grid;
    let mut mean = vec![0.0; grid.iter().product()];
    for r in &finals {
        for (m, v) in mean.iter_mut().zip(class_token_map(r)) {
            *m += v / finals.len() as f64;
        }
    }
    let mut agg = write_map(dir, "aggregate", &mean, grid, size)?;
    agg.stage = Some(last.0);
    agg.layer = Some(last.1);
    out.push(agg);
    for sc in &out {
        let text = serde_json::to_string_pretty(sc)? + "\n";
        fs::write(dir.join(format!("{}.json", sc.name)), text)?;
    }
    Ok(out)
}

/// Re-read a written map and undo the normalization.
pub fn read_map(dir: &Path, sidecar: &MapSidecar) -> Result<Vec<f64>> {
    let mut q = Vec::new();
    for f in &sidecar.frames {
        let (w, h, px) = read_pgm(&dir.join(f))?;
        if (h, w) != (sidecar.size[1], sidecar.size[2]) {
            return Err(Error::format(dir.join(f), "frame size disagrees with sidecar"));
        }
        q.extend(px);
    }
    Ok(dequantize(&q, sidecar.min, sidecar.max))
}
