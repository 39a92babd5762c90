//! Procedural shape world: the pretraining corpus, few-shot subject
//! references, and the exact template-matching oracle that scores
//! generated images in place of learned similarity metrics.

pub mod eval;
pub mod oracle;
pub mod render;
pub mod scenes;

pub use eval::{evaluate_run, EvalItem, EvalReport};
pub use oracle::{detect_all, oracle_detect, DetectOutcome, Detection};
pub use render::{make_subject_dataset, render_scene, SubjectDataset};
pub use scenes::{generate_pretrain_set, SceneGenConfig};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Category {
    pub const ALL: [Category; 4] =
        [Category::Circle, Category::Square, Category::Triangle, Category::Cross];

    pub fn word(&self) -> &'static str {
        match self {
            Category::Circle => "circle",
            Category::Square => "square",
            Category::Triangle => "triangle",
            Category::Cross => "cross",
        }
    }

    pub fn from_word(w: &str) -> Option<Category> {
        Category::ALL.iter().copied().find(|c| c.word() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 6] =
        [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Magenta, Color::Cyan];

    pub fn word(&self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Magenta => "magenta",
            Color::Cyan => "cyan",
        }
    }

    pub fn from_word(w: &str) -> Option<Color> {
        Color::ALL.iter().copied().find(|c| c.word() == w)
    }

    /// Bright fill tone in [-1, 1] RGB.
    pub fn bright(&self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, -0.9, -0.9],
            Color::Green => [-0.9, 0.9, -0.9],
            Color::Blue => [-0.9, -0.9, 0.9],
            Color::Yellow => [0.9, 0.9, -0.9],
            Color::Magenta => [0.9, -0.9, 0.9],
            Color::Cyan => [-0.9, 0.9, 0.9],
        }
    }

    /// Dim texture tone: the bright tone pulled towards mid-gray.
    pub fn dim(&self) -> [f64; 3] {
        let b = self.bright();
        [b[0] * 0.25, b[1] * 0.25, b[2] * 0.25]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Solid,
    Striped,
    Dotted,
}

impl TextureKind {
    pub const ALL: [TextureKind; 3] =
        [TextureKind::Solid, TextureKind::Striped, TextureKind::Dotted];

    pub fn word(&self) -> &'static str {
        match self {
            TextureKind::Solid => "solid",
            TextureKind::Striped => "striped",
            TextureKind::Dotted => "dotted",
        }
    }

    pub fn from_word(w: &str) -> Option<TextureKind> {
        TextureKind::ALL.iter().copied().find(|t| t.word() == w)
    }

    /// Whether the pixel at shape-local (x, y) uses the bright tone.
    pub fn is_bright(&self, x: usize, y: usize) -> bool {
        match self {
            TextureKind::Solid => true,
            TextureKind::Striped => y % 2 == 0,
            TextureKind::Dotted => (x + y) % 2 == 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Night,
    Dusk,
    Slate,
}

impl Background {
    pub const ALL: [Background; 3] = [Background::Night, Background::Dusk, Background::Slate];

    pub fn rgb(&self) -> [f64; 3] {
        match self {
            Background::Night => [-0.85, -0.85, -0.7],
            Background::Dusk => [-0.7, -0.55, -0.85],
            Background::Slate => [-0.7, -0.7, -0.7],
        }
    }
}

/// Identity of a rendered subject: what the oracle matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Appearance {
    pub category: Category,
    pub color: Color,
    pub texture: TextureKind,
}

impl std::fmt::Display for Appearance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {} {}", self.color.word(), self.texture.word(), self.category.word())
    }
}

/// Renderable subject description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub category: Category,
    pub color: Color,
    pub texture: TextureKind,
    /// Fraction of the target box the shape actually fills.
    #[serde(default = "default_size_frac")]
    pub size_frac: f64,
}

fn default_size_frac() -> f64 {
    1.0
}

impl ShapeSpec {
    pub fn new(category: Category, color: Color, texture: TextureKind) -> Self {
        ShapeSpec { category, color, texture, size_frac: 1.0 }
    }

    pub fn appearance(&self) -> Appearance {
        Appearance { category: self.category, color: self.color, texture: self.texture }
    }
}

/// Axis-aligned box in normalized [0, 1] coordinates, (x0, y0, x1, y1).
pub type NormBox = [f64; 4];

/// Axis-aligned pixel box, exclusive upper bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn from_norm(b: &NormBox, h: usize, w: usize) -> PixelBox {
        let clampi = |v: f64, hi: usize| (v.max(0.0).min(1.0) * hi as f64).round() as usize;
        PixelBox {
            x0: clampi(b[0], w),
            y0: clampi(b[1], h),
            x1: clampi(b[2], w),
            y1: clampi(b[3], h),
        }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let ix0 = self.x0.max(other.x0);
        let iy0 = self.y0.max(other.y0);
        let ix1 = self.x1.min(other.x1);
        let iy1 = self.y1.min(other.y1);
        let iw = ix1.saturating_sub(ix0);
        let ih = iy1.saturating_sub(iy0);
        let inter = (iw * ih) as f64;
        let union = (self.area() + other.area()) as f64 - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Shape-interior mask for `category` inscribed in this box,
    /// row-major over the box, shared by renderer and oracle.
    pub fn shape_mask(&self, category: Category) -> Vec<bool> {
        let (w, h) = (self.width(), self.height());
        let mut m = vec![false; w * h];
        let (cw, ch) = (w as f64 / 2.0, h as f64 / 2.0);
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = match category {
                    Category::Square => true,
                    Category::Circle => {
                        let dx = (fx - cw) / cw;
                        let dy = (fy - ch) / ch;
                        dx * dx + dy * dy <= 1.0
                    }
                    Category::Triangle => {
                        // apex at the top, base at the bottom
                        let half = (fy / h as f64) * cw;
                        (fx - cw).abs() <= half
                    }
                    Category::Cross => {
                        (fx - cw).abs() <= w as f64 / 6.0 || (fy - ch).abs() <= h as f64 / 6.0
                    }
                };
                if inside {
                    m[y * w + x] = true;
                }
            }
        }
        m
    }
}
