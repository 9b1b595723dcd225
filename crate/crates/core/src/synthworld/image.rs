use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stochastic::{sample_categorical, RngStream};

/// Feature width of one rendered slot: shape(3) + color(4) + size(2) + presence(1).
pub const FEATURE_DIM: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn css(self) -> &'static str {
        match self {
            Color::Red => "#d62728",
            Color::Green => "#2ca02c",
            Color::Blue => "#1f77b4",
            Color::Yellow => "#e6c300",
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];
}

/// One object slot. Absent slots carry the canonical null attributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub present: bool,
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
}

impl Slot {
    pub fn absent() -> Slot {
        Slot {
            present: false,
            shape: Shape::Circle,
            color: Color::Red,
            size: Size::Small,
        }
    }

    pub fn describe(&self) -> String {
        if self.present {
            format!("{:?} {:?} {:?}", self.size, self.color, self.shape).to_lowercase()
        } else {
            "-".to_string()
        }
    }
}

/// Image source. Shifted tags skew the attribute marginals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Base,
    ShiftedA,
    ShiftedB,
}

impl DomainTag {
    pub const ALL: [DomainTag; 3] = [DomainTag::Base, DomainTag::ShiftedA, DomainTag::ShiftedB];

    pub fn name(self) -> &'static str {
        match self {
            DomainTag::Base => "base",
            DomainTag::ShiftedA => "shifted_a",
            DomainTag::ShiftedB => "shifted_b",
        }
    }

    pub fn parse(s: &str) -> Option<DomainTag> {
        Self::ALL.iter().copied().find(|d| d.name() == s)
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn marginals(self) -> Marginals {
        match self {
            DomainTag::Base => Marginals {
                shape: vec![1.0 / 3.0; 3],
                color: vec![0.25; 4],
                size: vec![0.5; 2],
            },
            DomainTag::ShiftedA => Marginals {
                shape: vec![0.15, 0.15, 0.70],
                color: vec![0.25; 4],
                size: vec![0.3, 0.7],
            },
            DomainTag::ShiftedB => Marginals {
                shape: vec![0.45, 0.45, 0.10],
                color: vec![0.10, 0.10, 0.10, 0.70],
                size: vec![0.5, 0.5],
            },
        }
    }
}

/// Per-attribute categorical marginals of a domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    pub shape: Vec<f64>,
    pub color: Vec<f64>,
    pub size: Vec<f64>,
}

impl Marginals {
    /// Summed L1 distance over the three attribute marginals.
    pub fn l1(&self, other: &Marginals) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        d(&self.shape, &other.shape) + d(&self.color, &other.color) + d(&self.size, &other.size)
    }
}

/// Synthetic "image": a fixed number of object slots.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldImage {
    pub slots: Vec<Slot>,
    pub domain: DomainTag,
}

/// Image generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageConfig {
    pub b_slots: usize,
    pub domain: DomainTag,
    pub p_present: f64,
    pub force_all_present: bool,
}

impl Default for ImageConfig {
    fn default() -> Self {
        ImageConfig {
            b_slots: 4,
            domain: DomainTag::Base,
            p_present: 0.75,
            force_all_present: false,
        }
    }
}

impl WorldImage {
    pub fn present_count(&self) -> usize {
        self.slots.iter().filter(|s| s.present).count()
    }

    pub fn is_valid(&self) -> bool {
        self.present_count() >= 1 && self.slots.iter().all(|s| s.present || *s == Slot::absent())
    }

    /// `B x FEATURE_DIM` row-major features.
    pub fn features(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.slots.len() * FEATURE_DIM];
        for (row, s) in out.chunks_mut(FEATURE_DIM).zip(&self.slots) {
            if !s.present {
                continue;
            }
            row[s.shape as usize] = 1.0;
            row[3 + s.color as usize] = 1.0;
            row[7 + s.size as usize] = 1.0;
            row[9] = 1.0;
        }
        out
    }

    pub fn describe(&self) -> String {
        self.slots
            .iter()
            .filter(|s| s.present)
            .map(Slot::describe)
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Draws one image: slots i.i.d. from the domain marginals, redrawn until at
/// least one slot is present.
pub fn generate_image(cfg: &ImageConfig, rng: &mut RngStream) -> Result<WorldImage> {
    if cfg.b_slots == 0 {
        return Err(Error::Config("world.b_slots must be at least 1".into()));
    }
    let m = cfg.domain.marginals();
    loop {
        let mut slots = Vec::with_capacity(cfg.b_slots);
        for _ in 0..cfg.b_slots {
            let present = cfg.force_all_present || rng.bernoulli(cfg.p_present);
            let shape = Shape::ALL[sample_categorical(&m.shape, rng)?];
            let color = Color::ALL[sample_categorical(&m.color, rng)?];
            let size = Size::ALL[sample_categorical(&m.size, rng)?];
            slots.push(if present {
                Slot {
                    present,
                    shape,
                    color,
                    size,
                }
            } else {
                Slot::absent()
            });
        }
        let img = WorldImage {
            slots,
            domain: cfg.domain,
        };
        if img.present_count() > 0 {
            return Ok(img);
        }
    }
}
