use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Slots of the attribute schema, in rendering order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    HairColor,
    TopColor,
    TopType,
    BottomColor,
    BottomType,
}

impl Slot {
    pub const ALL: [Slot; 5] = [
        Slot::HairColor,
        Slot::TopColor,
        Slot::TopType,
        Slot::BottomColor,
        Slot::BottomType,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::HairColor => "hair_color",
            Slot::TopColor => "top_color",
            Slot::TopType => "top_type",
            Slot::BottomColor => "bottom_color",
            Slot::BottomType => "bottom_type",
        }
    }

    pub fn values(self) -> &'static [&'static str] {
        match self {
            Slot::HairColor => &["black", "brown", "blonde", "gray"],
            Slot::TopColor => &["red", "blue", "green", "yellow", "white", "black", "purple", "orange"],
            Slot::TopType => &["shirt", "jacket", "sweater", "coat", "t-shirt", "hoodie"],
            Slot::BottomColor => &["black", "blue", "gray", "brown", "white", "green"],
            Slot::BottomType => &["pants", "jeans", "shorts", "skirt", "trousers"],
        }
    }

    /// Body region a slot is rendered in.
    pub fn region(self) -> Region {
        match self {
            Slot::HairColor => Region::Hair,
            Slot::TopColor | Slot::TopType => Region::Top,
            Slot::BottomColor | Slot::BottomType => Region::Bottom,
        }
    }
}

/// Rectangular block of patches, inclusive bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Hair,
    Top,
    Bottom,
}

impl Region {
    /// `(row_lo, row_hi, col_lo, col_hi)` on the 8 × 8 patch grid, scaled to
    /// other grids proportionally.
    pub fn bounds(self, grid: (usize, usize)) -> (usize, usize, usize, usize) {
        let (r, c) = grid;
        let sr = |x: usize| x * r / 8;
        let sc = |x: usize| x * c / 8;
        match self {
            Region::Hair => (0, sr(2).max(1) - 1, sc(2), sc(6).max(sc(2) + 1) - 1),
            Region::Top => (sr(2), sr(5).max(sr(2) + 1) - 1, sc(1), sc(7).max(sc(1) + 1) - 1),
            Region::Bottom => (sr(5), r - 1, sc(2), sc(6).max(sc(2) + 1) - 1),
        }
    }

    pub fn contains(self, grid: (usize, usize), patch: usize) -> bool {
        let (r0, r1, c0, c1) = self.bounds(grid);
        let (r, c) = (patch / grid.1, patch % grid.1);
        (r0..=r1).contains(&r) && (c0..=c1).contains(&c)
    }

    pub fn patches(self, grid: (usize, usize)) -> Vec<usize> {
        (0..grid.0 * grid.1).filter(|&p| self.contains(grid, p)).collect()
    }
}

pub type Attributes = BTreeMap<Slot, String>;

/// One synthetic pedestrian image with its description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub identity: usize,
    pub attributes: Attributes,
    /// `rows × cols × patch_pixels`, values in [0, 1].
    pub image: Tensor,
    pub caption: String,
}

impl PersonRecord {
    pub fn attribute(&self, slot: Slot) -> &str {
        &self.attributes[&slot]
    }

    /// Slot whose garment or hair word appears in `words`, colors excluded.
    pub fn phrase_slot(&self, words: &[String]) -> Option<Slot> {
        let has = |w: &str| words.iter().any(|x| x == w);
        if has(self.attribute(Slot::TopType)) {
            Some(Slot::TopType)
        } else if has(self.attribute(Slot::BottomType)) {
            Some(Slot::BottomType)
        } else if has("hair") {
            Some(Slot::HairColor)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_identities: usize,
    pub images_per_identity: usize,
    /// Images of each identity held out for evaluation.
    pub test_per_identity: usize,
    pub patch_grid: (usize, usize),
    /// Pixels per patch side; a patch holds `side² × 3` values.
    pub patch_side: usize,
    pub noise_std: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_identities: 8,
            images_per_identity: 4,
            test_per_identity: 1,
            patch_grid: (8, 8),
            patch_side: 4,
            noise_std: 0.05,
        }
    }
}

impl DataConfig {
    pub fn patch_pixels(&self) -> usize {
        self.patch_side * self.patch_side * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 {
            return Err(Error::Config("need at least two identities".into()));
        }
        if self.test_per_identity == 0 || self.test_per_identity >= self.images_per_identity {
            return Err(Error::Config(format!(
                "test_per_identity={} must lie in 1..{}",
                self.test_per_identity, self.images_per_identity
            )));
        }
        if self.patch_grid.0 < 8 || self.patch_grid.1 < 8 || self.patch_side == 0 {
            return Err(Error::Config("patch grid must be at least 8 × 8".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// Records plus the train/test split (indices into `records`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub patch_grid: (usize, usize),
    pub patch_pixels: usize,
    pub records: Vec<PersonRecord>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn empty(patch_grid: (usize, usize), patch_pixels: usize) -> Self {
        Self {
            patch_grid,
            patch_pixels,
            records: Vec::new(),
            train: Vec::new(),
            test: Vec::new(),
        }
    }

    pub fn n_identities(&self) -> usize {
        self.records.iter().map(|r| r.identity).collect::<BTreeSet<_>>().len()
    }
}

/// Rendered RGB of a color word: the base hue lifted into [0.5, 1].
pub(crate) fn color_rgb(name: &str) -> [f64; 3] {
    base_rgb(name).map(|c| 0.5 + 0.5 * c)
}

fn base_rgb(name: &str) -> [f64; 3] {
    match name {
        "black" => [0.05, 0.05, 0.05],
        "white" => [0.95, 0.95, 0.95],
        "red" => [0.85, 0.1, 0.1],
        "blue" => [0.1, 0.2, 0.85],
        "green" => [0.1, 0.7, 0.2],
        "yellow" => [0.9, 0.85, 0.1],
        "gray" => [0.55, 0.55, 0.55],
        "brown" => [0.45, 0.25, 0.1],
        "purple" => [0.5, 0.1, 0.6],
        "orange" => [0.95, 0.5, 0.05],
        "blonde" => [0.9, 0.8, 0.45],
        _ => [0.4, 0.4, 0.4],
    }
}

const BACKGROUND: [f64; 3] = [0.7, 0.72, 0.7];

/// Brightness multiplier of a garment texture at pixel `(y, x)` of a patch.
fn texture(garment: &str, y: usize, x: usize) -> f64 {
    let dark = 0.75;
    let on = match garment {
        "jacket" | "trousers" => y.is_multiple_of(2),
        "sweater" | "jeans" => x.is_multiple_of(2),
        "coat" | "shorts" => (x + y).is_multiple_of(2),
        "t-shirt" | "skirt" => y < 2,
        "hoodie" => !(x + y).is_multiple_of(3),
        _ => true,
    };
    if on {
        1.0
    } else {
        dark
    }
}

/// Renders the noiseless image of an attribute set.
pub fn render(attrs: &Attributes, grid: (usize, usize), side: usize) -> Tensor {
    let p = side * side * 3;
    let mut data = Vec::with_capacity(grid.0 * grid.1 * p);
    for patch in 0..grid.0 * grid.1 {
        let (color, garment) = if Region::Hair.contains(grid, patch) {
            (color_rgb(&attrs[&Slot::HairColor]), "")
        } else if Region::Top.contains(grid, patch) {
            (color_rgb(&attrs[&Slot::TopColor]), attrs[&Slot::TopType].as_str())
        } else if Region::Bottom.contains(grid, patch) {
            (color_rgb(&attrs[&Slot::BottomColor]), attrs[&Slot::BottomType].as_str())
        } else {
            (BACKGROUND, "")
        };
        for y in 0..side {
            for x in 0..side {
                let m = texture(garment, y * 4 / side, x * 4 / side);
                data.extend(color.iter().map(|c| c * m));
            }
        }
    }
    Tensor::new(vec![grid.0, grid.1, p], data).expect("rendered image")
}

fn pick<'a>(rng: &mut Rng, options: &[&'a str]) -> &'a str {
    options[rng.below(options.len())]
}

/// Instantiates one caption template.
pub fn caption(attrs: &Attributes, rng: &mut Rng) -> String {
    let person = pick(rng, &["person", "man", "woman", "pedestrian", "individual"]);
    let pronoun = pick(rng, &["he", "she", "they"]);
    let verb = pick(rng, &["wears", "has"]);
    let a = |s: Slot| attrs[&s].as_str();
    let (hc, tc, tt, bc, bt) = (
        a(Slot::HairColor),
        a(Slot::TopColor),
        a(Slot::TopType),
        a(Slot::BottomColor),
        a(Slot::BottomType),
    );
    match rng.below(5) {
        0 => format!("the {person} is wearing a {tc} {tt} and {bc} {bt} . {pronoun} has {hc} hair ."),
        1 => format!("a {person} with {hc} hair {verb} a {tc} {tt} and {bc} {bt} ."),
        2 => format!("{person} in a {tc} {tt} , {bc} {bt} and with {hc} hair ."),
        3 => format!("this {person} has {hc} hair and is wearing {bc} {bt} with a {tc} {tt} ."),
        _ => format!("a {person} in {bc} {bt} and a {tc} {tt} . the {person} has {hc} hair ."),
    }
}

fn distinct_tuples(n: usize, rng: &mut Rng) -> Result<Vec<Attributes>> {
    let space: usize = Slot::ALL.iter().map(|s| s.values().len()).product();
    if n > space {
        return Err(Error::Config(format!("{n} identities exceed {space} attribute combinations")));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let attrs: Attributes = Slot::ALL
            .iter()
            .map(|&s| (s, pick(rng, s.values()).to_string()))
            .collect();
        if seen.insert(attrs.values().cloned().collect::<Vec<_>>()) {
            out.push(attrs);
        }
    }
    Ok(out)
}

/// Seeded corpus: distinct attribute tuples per identity, noisy renders,
/// template captions, split by image.
pub fn generate_dataset(cfg: &DataConfig, rng: &mut Rng) -> Result<Dataset> {
    cfg.validate()?;
    let identities = distinct_tuples(cfg.n_identities, rng)?;
    let mut ds = Dataset::empty(cfg.patch_grid, cfg.patch_pixels());
    for (id, attrs) in identities.iter().enumerate() {
        let clean = render(attrs, cfg.patch_grid, cfg.patch_side);
        for k in 0..cfg.images_per_identity {
            let mut image = clean.clone();
            for v in image.data_mut() {
                *v = (*v + cfg.noise_std * rng.normal()).clamp(0.0, 1.0);
            }
            let index = ds.records.len();
            ds.records.push(PersonRecord {
                identity: id,
                attributes: attrs.clone(),
                image,
                caption: caption(attrs, rng),
            });
            if k < cfg.images_per_identity - cfg.test_per_identity {
                ds.train.push(index);
            } else {
                ds.test.push(index);
            }
        }
    }
    Ok(ds)
}
