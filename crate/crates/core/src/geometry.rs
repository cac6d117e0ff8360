use serde::{Deserialize, Serialize};

/// Integer pixel rectangle; serialised as `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i32; 4]", into = "[i32; 4]")]
pub struct Rect {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

impl From<[i32; 4]> for Rect {
    fn from(v: [i32; 4]) -> Self {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Rect> for [i32; 4] {
    fn from(r: Rect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

impl Rect {
    pub const fn new(x: i32, y: i32, w: i32, h: i32) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> i32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> i32 {
        self.y + self.h
    }

    pub fn area(&self) -> i64 {
        if self.is_empty() {
            0
        } else {
            self.w as i64 * self.h as i64
        }
    }

    pub fn is_empty(&self) -> bool {
        self.w <= 0 || self.h <= 0
    }

    pub fn union(&self, other: &Rect) -> Rect {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        Rect::new(x, y, self.right().max(other.right()) - x, self.bottom().max(other.bottom()) - y)
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let x = self.x.max(other.x);
        let y = self.y.max(other.y);
        let r = Rect::new(x, y, self.right().min(other.right()) - x, self.bottom().min(other.bottom()) - y);
        (!r.is_empty()).then_some(r)
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.intersection(other).is_some()
    }

    pub fn pad(&self, amount: i32) -> Rect {
        Rect::new(self.x - amount, self.y - amount, self.w + 2 * amount, self.h + 2 * amount)
    }

    pub fn translate(&self, dx: i32, dy: i32) -> Rect {
        Rect::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    /// Clips to `[0, width) x [0, height)`; `None` when nothing remains.
    pub fn clip(&self, width: usize, height: usize) -> Option<Rect> {
        self.intersection(&Rect::new(0, 0, width as i32, height as i32))
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x && other.y >= self.y && other.right() <= self.right() && other.bottom() <= self.bottom()
    }

    pub fn inside_image(&self, width: usize, height: usize) -> bool {
        Rect::new(0, 0, width as i32, height as i32).contains(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn union_and_clip() {
        let a = Rect::new(4, 4, 8, 4);
        let b = Rect::new(20, 4, 8, 4);
        assert_eq!(a.union(&b), Rect::new(4, 4, 24, 4));
        assert!(!a.intersects(&b));
        assert_eq!(Rect::new(-2, -2, 6, 6).clip(10, 10), Some(Rect::new(0, 0, 4, 4)));
        assert_eq!(Rect::new(12, 0, 3, 3).clip(10, 10), None);
    }

    #[test]
    fn serialises_as_array() {
        let r = Rect::new(1, 2, 3, 4);
        assert_eq!(serde_json::to_string(&r).unwrap(), "[1,2,3,4]");
        let back: Rect = serde_json::from_str("[1,2,3,4]").unwrap();
        assert_eq!(back, r);
    }
}
