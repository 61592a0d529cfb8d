//! Feature and prediction export: binary PGM images and UTSR tensor dumps.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{make_batch, SyntheticSample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{Ctx, Mode, ParamStore};
use crate::scan::ConcatMode;
use crate::tensor::Tensor;

/// 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Argument {
                op: "pgm",
                detail: format!("{} pixels for a {width}x{height} image", pixels.len()),
            });
        }
        Ok(Self { width, height, pixels })
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn read_pgm<R: BufRead>(mut r: R) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut line = String::new();
        while tokens.len() < 4 {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated PGM header".into()));
            }
            let body = line.split('#').next().unwrap_or("");
            tokens.extend(body.split_whitespace().map(str::to_string));
        }
        if tokens[0] != "P5" || tokens[3] != "255" {
            return Err(Error::Format(format!("unsupported PGM header {:?}", &tokens[..4])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM extent {s:?}")));
        let (width, height) = (parse(&tokens[1])?, parse(&tokens[2])?);
        let mut pixels = vec![0u8; width * height];
        r.read_exact(&mut pixels)?;
        Self::new(width, height, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_pgm(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// Min-max normalize to `0..=255`; a constant map becomes all zeros.
pub fn to_gray(values: &[f64], width: usize, height: usize) -> Result<GrayImage> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let px = values
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    GrayImage::new(width, height, px)
}

/// Label map rendered with classes spread evenly over the gray range.
pub fn label_image(labels: &[usize], classes: usize, width: usize, height: usize) -> Result<GrayImage> {
    let top = classes.saturating_sub(1).max(1);
    let px = labels.iter().map(|&l| ((l.min(top) * 255) / top) as u8).collect();
    GrayImage::new(width, height, px)
}

/// Per-pixel L2 norm over channels of the first item of `[N, C, H, W]`.
pub fn feature_magnitude(t: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Shape {
            op: "feature_magnitude",
            detail: format!("expected [N, C, H, W], got {s:?}"),
        });
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let hw = h * w;
    let d = t.data();
    let mag = (0..hw)
        .map(|p| (0..c).map(|k| d[k * hw + p].powi(2)).sum::<f64>().sqrt())
        .collect();
    Ok((mag, h, w))
}

/// Change mask of a scene resampled onto a feature map of `fh × fw`.
///
/// In the horizontal layout the map spans both dates side by side, so each
/// half receives the same mask. A cell is marked changed when most of the
/// scene pixels it covers are.
pub fn mask_on_grid(change: &[usize], h: usize, w: usize, fh: usize, fw: usize, concat: ConcatMode) -> Vec<bool> {
    let halves = match concat {
        ConcatMode::Horizontal => 2,
        ConcatMode::Channel => 1,
    };
    let (sy, sx) = (h / fh, (w * halves) / fw);
    let mut out = Vec::with_capacity(fh * fw);
    for i in 0..fh {
        for j in 0..fw {
            let mut hits = 0;
            for y in i * sy..(i + 1) * sy {
                for x in j * sx..(j + 1) * sx {
                    hits += usize::from(change[y * w + x % w] == 1);
                }
            }
            out.push(2 * hits > sy * sx);
        }
    }
    out
}

/// Mean of `values` inside the mask over the mean outside; `None` when
/// either side is empty or the outside mean is zero.
pub fn inside_outside_ratio(values: &[f64], mask: &[bool]) -> Option<f64> {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in values.iter().zip(mask) {
        if m {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    if ni == 0 || no == 0 || so == 0.0 {
        return None;
    }
    Some((si / ni as f64) / (so / no as f64))
}

/// Files and statistics of one exported stage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageExport {
    pub stage: usize,
    pub width: usize,
    pub height: usize,
    pub pgm: PathBuf,
    pub utsr: PathBuf,
    /// Mean magnitude inside the change mask over the mean outside it.
    pub change_ratio: Option<f64>,
}

/// Run `sample` through the model and write the post-prompt feature
/// magnitude of each requested stage (1 to 4) to `dir`.
pub fn export_features(
    model: &Model,
    params: &ParamStore,
    sample: &SyntheticSample,
    stages: &[usize],
    dir: &Path,
) -> Result<Vec<StageExport>> {
    if let Some(&s) = stages.iter().find(|&&s| !(1..=4).contains(&s)) {
        return Err(Error::Usage(format!("stage {s} out of range 1..=4")));
    }
    let batch = make_batch(&[sample], model.cfg.task)?;
    let mut cx = Ctx::new(params, Mode::Eval).with_grad_groups(&[]);
    let out = model.forward(&mut cx, &batch.pre, &batch.post)?;
    std::fs::create_dir_all(dir)?;
    let mut done = Vec::new();
    for &s in stages {
        let t = cx.g.value(out.pyramid.levels[s - 1]);
        let (mag, h, w) = feature_magnitude(t)?;
        let pgm = dir.join(format!("stage{s}.pgm"));
        let utsr = dir.join(format!("stage{s}.utsr"));
        to_gray(&mag, w, h)?.save(&pgm)?;
        let mut buf = Vec::new();
        t.write_utsr(&mut buf)?;
        std::fs::write(&utsr, buf)?;
        let mask = mask_on_grid(&sample.labels.change, sample.height(), sample.width(), h, w, model.cfg.concat);
        done.push(StageExport {
            stage: s,
            width: w,
            height: h,
            pgm,
            utsr,
            change_ratio: inside_outside_ratio(&mag, &mask),
        });
    }
    Ok(done)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let img = GrayImage::new(3, 2, vec![0, 10, 20, 30, 40, 255]).unwrap();
        let mut buf = Vec::new();
        img.write_pgm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(GrayImage::read_pgm(buf.as_slice()).unwrap(), img);
    }

    #[test]
    fn constant_map_is_black() {
        assert_eq!(to_gray(&[2.0; 4], 2, 2).unwrap().pixels, vec![0; 4]);
        assert_eq!(to_gray(&[1.0, 3.0], 2, 1).unwrap().pixels, vec![0, 255]);
    }

    #[test]
    fn horizontal_mask_repeats_per_half() {
        // 2×2 scene, top-left pixel changed, mapped onto a 2×4 grid.
        let m = mask_on_grid(&[1, 0, 0, 0], 2, 2, 2, 4, ConcatMode::Horizontal);
        assert_eq!(m, vec![true, false, true, false, false, false, false, false]);
    }
}
