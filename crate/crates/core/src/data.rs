//! Deterministic synthetic bitemporal scenes.
//!
//! Every scene is described by a [`SceneGeometry`] of axis-aligned rectangles
//! and ellipses with half-integer centers and radii. Label maps are pure
//! functions of that geometry, so they can be recomputed after any flip or
//! quarter-turn. Images are textured class colors; the post image may carry
//! pseudo-changes (brightness shift, noise, shadow patches) that leave the
//! labels untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::MAX_STRIDE;
use crate::error::{Error, Result};
use crate::head::TaskKind;
use crate::loss::{TaskLabels, IGNORE};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

/// Shape in pixel coordinates; pixel `(i, j)` has center `(i + 0.5, j + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
}

impl Shape {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        let dy = i as f64 + 0.5 - self.cy;
        let dx = j as f64 + 0.5 - self.cx;
        match self.kind {
            ShapeKind::Rect => dy.abs() <= self.ry && dx.abs() <= self.rx,
            ShapeKind::Ellipse => (dy / self.ry).powi(2) + (dx / self.rx).powi(2) <= 1.0,
        }
    }
}

/// A shape with a land-cover class (semantic scenes) or damage level (buildings).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub shape: Shape,
    pub value: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub height: usize,
    pub width: usize,
    /// Background land-cover class of both dates.
    pub background: usize,
    /// Painted in order over the background; later regions win.
    pub regions_t1: Vec<Region>,
    pub regions_t2: Vec<Region>,
    /// Buildings with their damage level `1..=levels` (damage scenes only).
    pub buildings: Vec<Region>,
    /// Areas of the post image darkened without any real change.
    pub shadows: Vec<Shape>,
}

impl SceneGeometry {
    fn paint(&self, regions: &[Region]) -> Vec<usize> {
        let mut m = vec![self.background; self.height * self.width];
        for r in regions {
            self.fill(&mut m, &r.shape, r.value);
        }
        m
    }

    fn fill(&self, m: &mut [usize], s: &Shape, v: usize) {
        for i in 0..self.height {
            for j in 0..self.width {
                if s.contains(i, j) {
                    m[i * self.width + j] = v;
                }
            }
        }
    }

    /// Land-cover maps of both dates.
    pub fn land_cover(&self) -> (Vec<usize>, Vec<usize>) {
        (self.paint(&self.regions_t1), self.paint(&self.regions_t2))
    }

    /// Building footprint (1) and per-pixel damage level (or [`IGNORE`]).
    pub fn damage_maps(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.height * self.width;
        let mut loc = vec![0; n];
        let mut dmg = vec![IGNORE; n];
        for b in &self.buildings {
            self.fill(&mut loc, &b.shape, 1);
            self.fill(&mut dmg, &b.shape, b.value);
        }
        (loc, dmg)
    }

    pub fn shadow_mask(&self) -> Vec<bool> {
        let mut m = vec![0; self.height * self.width];
        for s in &self.shadows {
            self.fill(&mut m, s, 1);
        }
        m.into_iter().map(|v| v == 1).collect()
    }

    /// All label maps implied by the geometry.
    pub fn labels(&self) -> SampleLabels {
        let (lc1, lc2) = self.land_cover();
        let change: Vec<usize> = lc1.iter().zip(&lc2).map(|(a, b)| usize::from(a != b)).collect();
        let sem = |lc: &[usize]| -> Vec<usize> {
            lc.iter().zip(&change).map(|(&c, &ch)| if ch == 1 { c + 1 } else { 0 }).collect()
        };
        let (loc, dmg) = self.damage_maps();
        SampleLabels {
            sem_t1: sem(&lc1),
            sem_t2: sem(&lc2),
            change,
            loc,
            dmg,
        }
    }

    fn map_shapes(&mut self, f: impl Fn(Shape) -> Shape) {
        for r in self.regions_t1.iter_mut().chain(&mut self.regions_t2).chain(&mut self.buildings) {
            r.shape = f(r.shape);
        }
        for s in &mut self.shadows {
            *s = f(*s);
        }
    }
}

/// Per-pixel labels of one sample, row-major `H×W`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleLabels {
    /// 1 where the land cover differs between dates.
    pub change: Vec<usize>,
    /// Land-cover class + 1 on changed pixels, 0 elsewhere.
    pub sem_t1: Vec<usize>,
    pub sem_t2: Vec<usize>,
    pub loc: Vec<usize>,
    pub dmg: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub pre: Tensor,
    pub post: Tensor,
    pub labels: SampleLabels,
    pub geometry: SceneGeometry,
    pub seed: u64,
    pub index: u64,
}

impl SyntheticSample {
    pub fn height(&self) -> usize {
        self.geometry.height
    }

    pub fn width(&self) -> usize {
        self.geometry.width
    }

    /// Pixels darkened by a shadow that carry no real change.
    pub fn distractor_only(&self) -> Vec<bool> {
        let changed = match self.geometry.buildings.is_empty() {
            true => &self.labels.change,
            false => &self.labels.loc,
        };
        self.geometry
            .shadow_mask()
            .iter()
            .zip(changed)
            .map(|(&s, &c)| s && c == 0)
            .collect()
    }
}

/// Pseudo-change settings applied to the post image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistractorConfig {
    /// Global brightness offset drawn from `[-b, b]`.
    pub brightness: f64,
    /// Standard deviation of additive noise.
    pub noise: f64,
    /// Number of shadow patches.
    pub shadows: usize,
    /// Multiplicative darkening inside shadows.
    pub shadow_gain: f64,
}

impl Default for DistractorConfig {
    fn default() -> Self {
        Self {
            brightness: 0.08,
            noise: 0.02,
            shadows: 1,
            shadow_gain: 0.65,
        }
    }
}

impl DistractorConfig {
    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            noise: 0.0,
            shadows: 0,
            shadow_gain: 1.0,
        }
    }
}

const PALETTE: [[f64; 3]; 8] = [
    [0.35, 0.55, 0.25],
    [0.75, 0.72, 0.65],
    [0.20, 0.35, 0.70],
    [0.80, 0.45, 0.30],
    [0.55, 0.30, 0.60],
    [0.85, 0.80, 0.30],
    [0.30, 0.65, 0.65],
    [0.45, 0.45, 0.45],
];
const RUBBLE: [f64; 3] = [0.50, 0.40, 0.32];
const TEXTURE_AMPLITUDE: f64 = 0.08;

fn class_color(c: usize) -> [f64; 3] {
    let base = PALETTE[c % PALETTE.len()];
    let shade = 1.0 - 0.15 * (c / PALETTE.len()) as f64;
    base.map(|v| v * shade)
}

/// Textured rendering of a class map; the texture depends on class and
/// position only, so identical land cover renders identically on both dates.
fn render(classes: &[usize], h: usize, w: usize, phase: f64) -> Vec<f64> {
    let mut img = vec![0.0; 3 * h * w];
    for i in 0..h {
        for j in 0..w {
            let c = classes[i * w + j];
            let f = 0.6 + 0.35 * (c % 5) as f64;
            let angle = 0.7 * c as f64;
            let t = TEXTURE_AMPLITUDE
                * (f * (i as f64 * angle.cos() + j as f64 * angle.sin()) + phase + c as f64).sin();
            let col = class_color(c);
            for ch in 0..3 {
                img[(ch * h + i) * w + j] = col[ch] + t;
            }
        }
    }
    img
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on (0, 1]
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn random_shape(rng: &mut ChaCha8Rng, h: usize, w: usize, rmin: usize, rmax: usize) -> Shape {
    let ry = rng.gen_range(rmin..=rmax) as f64;
    let rx = rng.gen_range(rmin..=rmax) as f64;
    let cy = rng.gen_range(0..2 * h) as f64 * 0.5;
    let cx = rng.gen_range(0..2 * w) as f64 * 0.5;
    let kind = if rng.gen_bool(0.5) {
        ShapeKind::Rect
    } else {
        ShapeKind::Ellipse
    };
    Shape { kind, cy, cx, ry, rx }
}

fn other_class(rng: &mut ChaCha8Rng, k: usize, not: usize) -> usize {
    let c = rng.gen_range(0..k - 1);
    if c >= not {
        c + 1
    } else {
        c
    }
}

fn semantic_geometry(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> SceneGeometry {
    let background = rng.gen_range(0..k);
    let (rmin, rmax) = ((h / 10).max(2), (h / 4).max(3));
    let mut t1 = Vec::new();
    for _ in 0..rng.gen_range(2..=4) {
        let value = other_class(rng, k, background);
        t1.push(Region {
            shape: random_shape(rng, h, w, rmin, rmax),
            value,
        });
    }
    let mut t2 = Vec::new();
    for r in &t1 {
        let u: f64 = rng.gen();
        if u < 0.3 {
            continue;
        }
        let value = if u < 0.55 { other_class(rng, k, r.value) } else { r.value };
        t2.push(Region { shape: r.shape, value });
    }
    for _ in 0..rng.gen_range(0..=2) {
        let value = rng.gen_range(0..k);
        t2.push(Region {
            shape: random_shape(rng, h, w, rmin, rmax),
            value,
        });
    }
    SceneGeometry {
        height: h,
        width: w,
        background,
        regions_t1: t1,
        regions_t2: t2,
        buildings: Vec::new(),
        shadows: Vec::new(),
    }
}

fn damage_geometry(rng: &mut ChaCha8Rng, h: usize, w: usize, levels: usize) -> SceneGeometry {
    let (rmin, rmax) = ((h / 12).max(2), (h / 5).max(3));
    let buildings = (0..rng.gen_range(3..=5))
        .map(|_| {
            let mut shape = random_shape(rng, h, w, rmin, rmax);
            shape.kind = ShapeKind::Rect;
            Region {
                shape,
                value: rng.gen_range(1..=levels),
            }
        })
        .collect();
    SceneGeometry {
        height: h,
        width: w,
        background: 0,
        regions_t1: Vec::new(),
        regions_t2: Vec::new(),
        buildings,
        shadows: Vec::new(),
    }
}

/// Land-cover class used for building roofs in damage scenes.
const ROOF_CLASS: usize = 1;

fn render_damage(
    rng: &mut ChaCha8Rng,
    geo: &SceneGeometry,
    labels: &SampleLabels,
    levels: usize,
    phase: f64,
) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (geo.height, geo.width);
    let classes: Vec<usize> = labels.loc.iter().map(|&l| if l == 1 { ROOF_CLASS } else { 0 }).collect();
    let pre = render(&classes, h, w, phase);
    let mut post = pre.clone();
    for p in 0..h * w {
        let lvl = labels.dmg[p];
        if lvl == IGNORE {
            continue;
        }
        // Fraction of roof replaced by rubble grows with the damage level.
        let frac = (lvl - 1) as f64 / (levels - 1) as f64;
        let hit = rng.gen::<f64>() < frac;
        if hit {
            for (ch, rub) in RUBBLE.iter().enumerate() {
                post[ch * h * w + p] = rub + 0.1 * (rng.gen::<f64>() - 0.5);
            }
        }
    }
    (pre, post)
}

fn apply_distractors(rng: &mut ChaCha8Rng, geo: &mut SceneGeometry, img: &mut [f64], d: &DistractorConfig) {
    let (h, w) = (geo.height, geo.width);
    for _ in 0..d.shadows {
        geo.shadows.push(random_shape(rng, h, w, (h / 8).max(2), (h / 4).max(3)));
    }
    let shadow = geo.shadow_mask();
    let shift = if d.brightness > 0.0 {
        rng.gen_range(-d.brightness..=d.brightness)
    } else {
        0.0
    };
    for ch in 0..3 {
        for p in 0..h * w {
            let v = &mut img[ch * h * w + p];
            if shadow[p] {
                *v *= d.shadow_gain;
            }
            *v += shift;
            if d.noise > 0.0 {
                *v += d.noise * gaussian(rng);
            }
        }
    }
}

fn clamp01(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
}

/// Generate one scene for `task` from `(seed, index)`.
pub fn generate_sample(
    task: TaskKind,
    h: usize,
    w: usize,
    seed: u64,
    index: u64,
    d: &DistractorConfig,
) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let (mut geo, pre, mut post) = match task {
        TaskKind::Bcd | TaskKind::Scd { .. } => {
            let k = match task {
                TaskKind::Scd { classes } => classes,
                _ => 4,
            };
            let geo = semantic_geometry(&mut rng, h, w, k);
            let (lc1, lc2) = geo.land_cover();
            (geo, render(&lc1, h, w, phase), render(&lc2, h, w, phase))
        }
        TaskKind::Bda { levels } => {
            let geo = damage_geometry(&mut rng, h, w, levels);
            let labels = geo.labels();
            let (pre, post) = render_damage(&mut rng, &geo, &labels, levels, phase);
            (geo, pre, post)
        }
    };
    let mut pre = pre;
    apply_distractors(&mut rng, &mut geo, &mut post, d);
    clamp01(&mut pre);
    clamp01(&mut post);
    Ok(SyntheticSample {
        pre: Tensor::new(&[3, h, w], pre)?,
        post: Tensor::new(&[3, h, w], post)?,
        labels: geo.labels(),
        geometry: geo,
        seed,
        index,
    })
}

/// `n` scenes of size `h×w`; both extents must be multiples of 32.
pub fn generate_dataset(
    task: TaskKind,
    n: usize,
    h: usize,
    w: usize,
    seed: u64,
    d: &DistractorConfig,
) -> Result<Vec<SyntheticSample>> {
    task.validate()?;
    if h == 0 || w == 0 || !h.is_multiple_of(MAX_STRIDE) || !w.is_multiple_of(MAX_STRIDE) {
        return Err(Error::Config(format!(
            "image size {h}×{w} must be a positive multiple of {MAX_STRIDE} in both axes"
        )));
    }
    (0..n as u64).map(|i| generate_sample(task, h, w, seed, i, d)).collect()
}

/// FNV-1a digest over all image bits and labels.
pub fn dataset_digest(samples: &[SyntheticSample]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for s in samples {
        for v in s.pre.data().iter().chain(s.post.data()) {
            feed(v.to_bits());
        }
        let l = &s.labels;
        for &v in l.change.iter().chain(&l.sem_t1).chain(&l.sem_t2).chain(&l.loc).chain(&l.dmg) {
            feed(v as u64);
        }
    }
    h
}

/// Joint spatial transform: optional left-right flip, optional top-bottom
/// flip, then `quarter_turns` counter-clockwise rotations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Transform {
    pub flip_lr: bool,
    pub flip_tb: bool,
    pub quarter_turns: u8,
}

impl Transform {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            flip_lr: rng.gen_bool(0.5),
            flip_tb: rng.gen_bool(0.5),
            quarter_turns: rng.gen_range(0..4),
        }
    }
}

fn flip_lr_map<T: Copy>(m: &[T], h: usize, w: usize) -> Vec<T> {
    (0..h * w).map(|p| m[(p / w) * w + (w - 1 - p % w)]).collect()
}

fn flip_tb_map<T: Copy>(m: &[T], h: usize, w: usize) -> Vec<T> {
    (0..h * w).map(|p| m[(h - 1 - p / w) * w + p % w]).collect()
}

/// Counter-clockwise quarter turn of an `h×w` map into a `w×h` map.
fn rot90_map<T: Copy>(m: &[T], h: usize, w: usize) -> Vec<T> {
    // new[i][j] = old[j][w - 1 - i], new extents (w, h)
    (0..w * h).map(|p| m[(p % h) * w + (w - 1 - p / h)]).collect()
}

fn map_planes(t: &Tensor, f: impl Fn(&[f64]) -> Vec<f64>, out_hw: (usize, usize)) -> Tensor {
    let s = t.shape();
    let hw = s[1] * s[2];
    let data: Vec<f64> = t.data().chunks_exact(hw).flat_map(f).collect();
    Tensor::new(&[s[0], out_hw.0, out_hw.1], data).expect("same element count")
}

fn map_all(s: &mut SyntheticSample, f: &dyn Fn(&[usize], usize, usize) -> Vec<usize>, g: &dyn Fn(&[f64], usize, usize) -> Vec<f64>, out: (usize, usize)) {
    let (h, w) = (s.height(), s.width());
    s.pre = map_planes(&s.pre, |p| g(p, h, w), out);
    s.post = map_planes(&s.post, |p| g(p, h, w), out);
    let l = &mut s.labels;
    for m in [&mut l.change, &mut l.sem_t1, &mut l.sem_t2, &mut l.loc, &mut l.dmg] {
        *m = f(m, h, w);
    }
    s.geometry.height = out.0;
    s.geometry.width = out.1;
}

/// Apply `t` jointly to both images, every label map and the geometry.
pub fn apply_transform(mut s: SyntheticSample, t: Transform) -> SyntheticSample {
    if t.flip_lr {
        let (h, w) = (s.height(), s.width());
        map_all(&mut s, &flip_lr_map::<usize>, &flip_lr_map::<f64>, (h, w));
        let wf = w as f64;
        s.geometry.map_shapes(|sh| Shape { cx: wf - sh.cx, ..sh });
    }
    if t.flip_tb {
        let (h, w) = (s.height(), s.width());
        map_all(&mut s, &flip_tb_map::<usize>, &flip_tb_map::<f64>, (h, w));
        let hf = h as f64;
        s.geometry.map_shapes(|sh| Shape { cy: hf - sh.cy, ..sh });
    }
    for _ in 0..t.quarter_turns % 4 {
        let (h, w) = (s.height(), s.width());
        map_all(&mut s, &rot90_map::<usize>, &rot90_map::<f64>, (w, h));
        let wf = w as f64;
        s.geometry.map_shapes(|sh| Shape {
            kind: sh.kind,
            cy: wf - sh.cx,
            cx: sh.cy,
            ry: sh.rx,
            rx: sh.ry,
        });
    }
    s
}

/// Random joint flip/rotation keyed by `seed`.
pub fn augment(s: SyntheticSample, seed: u64) -> SyntheticSample {
    apply_transform(s, Transform::random(seed))
}

/// Stacked images and task labels for a set of equally sized samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub pre: Tensor,
    pub post: Tensor,
    pub labels: TaskLabels,
}

pub fn make_batch(samples: &[&SyntheticSample], task: TaskKind) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("cannot build a batch from zero samples".into()))?;
    let (h, w) = (first.height(), first.width());
    if samples.iter().any(|s| s.height() != h || s.width() != w) {
        return Err(Error::Data("batch samples differ in size".into()));
    }
    let n = samples.len();
    let stack = |f: &dyn Fn(&SyntheticSample) -> &Tensor| -> Result<Tensor> {
        let data: Vec<f64> = samples.iter().flat_map(|s| f(s).data().iter().copied()).collect();
        Tensor::new(&[n, 3, h, w], data)
    };
    let cat = |f: &dyn Fn(&SampleLabels) -> &Vec<usize>| -> Vec<usize> {
        samples.iter().flat_map(|s| f(&s.labels).iter().copied()).collect()
    };
    let labels = match task {
        TaskKind::Bcd => TaskLabels::Bcd { change: cat(&|l| &l.change) },
        TaskKind::Scd { .. } => TaskLabels::Scd {
            change: cat(&|l| &l.change),
            t1: cat(&|l| &l.sem_t1),
            t2: cat(&|l| &l.sem_t2),
        },
        TaskKind::Bda { .. } => TaskLabels::Bda {
            loc: cat(&|l| &l.loc),
            dmg: cat(&|l| &l.dmg),
        },
    };
    Ok(Batch {
        pre: stack(&|s| &s.pre)?,
        post: stack(&|s| &s.post)?,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_indivisible() {
        let d = DistractorConfig::default();
        assert!(generate_dataset(TaskKind::Bcd, 0, 32, 32, 1, &d).unwrap().is_empty());
        assert!(matches!(
            generate_dataset(TaskKind::Bcd, 1, 30, 32, 1, &d),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn quarter_turn_of_a_small_map() {
        // 2×3 map, counter-clockwise
        let m = [1, 2, 3, 4, 5, 6];
        assert_eq!(rot90_map(&m, 2, 3), vec![3, 6, 2, 5, 1, 4]);
    }

    #[test]
    fn damage_only_on_buildings() {
        let s = generate_sample(TaskKind::Bda { levels: 4 }, 32, 32, 3, 0, &DistractorConfig::default()).unwrap();
        for (&l, &d) in s.labels.loc.iter().zip(&s.labels.dmg) {
            assert_eq!(l == 1, d != IGNORE);
            assert!(d == IGNORE || (1..=4).contains(&d));
        }
    }
}
