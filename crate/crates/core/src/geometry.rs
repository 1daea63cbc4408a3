use serde::{Deserialize, Serialize};

/// Integer voxel coordinate; z is up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Voxel(pub i32, pub i32, pub i32);

impl Voxel {
    pub fn column(self) -> Cell {
        Cell(self.0 as usize, self.1 as usize)
    }

    /// The 26 neighbours (face, edge and corner adjacency).
    pub fn neighbors26(self) -> impl Iterator<Item = Voxel> {
        (-1..=1).flat_map(move |dx| {
            (-1..=1).flat_map(move |dy| {
                (-1..=1).filter_map(move |dz| {
                    if dx == 0 && dy == 0 && dz == 0 {
                        None
                    } else {
                        Some(Voxel(self.0 + dx, self.1 + dy, self.2 + dz))
                    }
                })
            })
        })
    }

    /// Floors a metric point to the voxel containing it.
    pub fn from_point(p: [f64; 3], voxel_size: f64) -> Voxel {
        Voxel(
            (p[0] / voxel_size).floor() as i32,
            (p[1] / voxel_size).floor() as i32,
            (p[2] / voxel_size).floor() as i32,
        )
    }
}

/// Top-down grid cell (i = x column, j = y row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell(pub usize, pub usize);

impl Cell {
    /// Metric centre of the cell.
    pub fn center(self, cell_size: f64) -> [f64; 2] {
        [
            (self.0 as f64 + 0.5) * cell_size,
            (self.1 as f64 + 0.5) * cell_size,
        ]
    }

    pub fn from_point(p: [f64; 2], cell_size: f64) -> Option<Cell> {
        if !(p[0] >= 0.0 && p[1] >= 0.0) {
            return None;
        }
        Some(Cell(
            (p[0] / cell_size).floor() as usize,
            (p[1] / cell_size).floor() as usize,
        ))
    }
}

/// Image-space pixel (column u, row v) of a ray in the camera fan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pixel(pub u32, pub u32);

/// Inclusive pixel-space rectangle `(x_min, y_min, x_max, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// Minimal rectangle containing every pixel; `None` for an empty mask.
    pub fn enclosing<'a, I>(pixels: I) -> Option<BBox>
    where
        I: IntoIterator<Item = &'a Pixel>,
    {
        let mut it = pixels.into_iter();
        let first = it.next()?;
        let mut b = BBox::new(
            first.0 as f64,
            first.1 as f64,
            first.0 as f64,
            first.1 as f64,
        );
        for p in it {
            b.x_min = b.x_min.min(p.0 as f64);
            b.y_min = b.y_min.min(p.1 as f64);
            b.x_max = b.x_max.max(p.0 as f64);
            b.y_max = b.y_max.max(p.1 as f64);
        }
        Some(b)
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Continuous rectangle covering the pixels of an inclusive pixel box.
    pub fn pixel_extent(&self) -> BBox {
        BBox::new(self.x_min, self.y_min, self.x_max + 1.0, self.y_max + 1.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min <= self.x_max && self.y_min <= self.y_max
    }
}

/// Wraps an angle into `[0, 2π)`.
pub fn normalize_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let r = a.rem_euclid(tau);
    if r >= tau {
        0.0
    } else {
        r
    }
}
