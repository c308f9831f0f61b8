//! Attention-map export: per-block `P`, `E` and `G` as tensors, 8-bit PGM
//! renderings and top/bottom half statistics.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::save_tensor;
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::pcr::Network;
use crate::tensor::{Real, Tape, Tensor};

/// Binary PGM of a 2-D map, min–max scaled to 0..=255. A constant map
/// renders as 128 everywhere.
pub fn pgm_bytes<T: Real>(map: &[T], h: usize, w: usize) -> Vec<u8> {
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.f64()), hi.max(v.f64())));
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.iter().map(|v| {
        if hi > lo {
            (255.0 * (v.f64() - lo) / (hi - lo)).round() as u8
        } else {
            128
        }
    }));
    out
}

/// Means of the top and bottom halves of an `[H,W]` map. The middle row of an
/// odd height belongs to neither.
pub fn half_means<T: Real>(map: &[T], h: usize, w: usize) -> (f64, f64) {
    let half = h / 2;
    let mean = |rows: std::ops::Range<usize>| {
        let n = rows.len() * w;
        map[rows.start * w..rows.end * w].iter().map(|v| v.f64()).sum::<f64>() / n as f64
    };
    if half == 0 {
        let m = mean(0..h);
        return (m, m);
    }
    (mean(0..half), mean(h - half..h))
}

/// Statistics of one exported map.
#[derive(Clone, Debug, PartialEq)]
pub struct MapStats {
    pub stage: usize,
    pub block: usize,
    pub map: &'static str,
    pub top_mean: f64,
    pub bottom_mean: f64,
}

impl MapStats {
    pub fn line(&self) -> String {
        format!(
            "stage={} block={} map={} top_mean={} bottom_mean={}",
            self.stage, self.block, self.map, self.top_mean, self.bottom_mean
        )
    }
}

/// The `[H,W]` attention map of every recalibrated block for a single image
/// `[1,C,H,W]`, in eval mode: `(stage, block, map)` with 1-based stage.
pub fn attention_maps<T: Real>(net: &Network<T>, image: Tensor<T>) -> Result<Vec<(usize, usize, Tensor<T>)>> {
    if image.rank() != 4 || image.shape()[0] != 1 {
        return Err(Error::Shape(format!("expected one image [1,C,H,W], got {:?}", image.shape())));
    }
    let mut net = net.clone();
    let mut tape = Tape::new();
    let x = tape.constant(image);
    let fwd = net.forward(&mut tape, x, Mode::Eval)?;
    fwd.attention
        .iter()
        .map(|t| {
            let g = tape.value(t.g);
            let (h, w) = (g.shape()[2], g.shape()[3]);
            Ok((t.stage + 1, t.block, g.clone().reshape(&[h, w])?))
        })
        .collect()
}

/// Writes `stage{S}.block{K}.{p,e,g}` as `.pcrt` and `.pgm` files plus
/// `stats.txt` into `dir`, for one image `[1,C,H,W]`.
pub fn export_attention<T: Real>(net: &Network<T>, image: Tensor<T>, dir: &Path) -> Result<Vec<MapStats>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let maps = attention_maps(net, image)?;
    let mut stats = Vec::new();
    for (stage, block, g) in maps {
        let prefix = format!("stage{stage}.block{block}");
        let param = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            net.param_index(&name)
                .map(|i| net.params()[i].value.clone())
                .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
        };
        for (label, map) in [("p", param("prm.p")?), ("e", param("epga.e")?), ("g", g)] {
            let (h, w) = (map.shape()[0], map.shape()[1]);
            save_tensor(&dir.join(format!("{prefix}.{label}.pcrt")), &map)?;
            let pgm = dir.join(format!("{prefix}.{label}.pgm"));
            std::fs::write(&pgm, pgm_bytes(map.data(), h, w)).map_err(|e| Error::io(&pgm, e))?;
            let (top_mean, bottom_mean) = half_means(map.data(), h, w);
            stats.push(MapStats {
                stage,
                block,
                map: match label {
                    "p" => "P",
                    "e" => "E",
                    _ => "G",
                },
                top_mean,
                bottom_mean,
            });
        }
    }
    let mut text = String::new();
    for s in &stats {
        let _ = writeln!(text, "{}", s.line());
    }
    let path = dir.join("stats.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(stats)
}
