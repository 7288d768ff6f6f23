use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QuadError, Result};

/// The six concepts that can be intervened on, in modelling order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Concept {
    Quad1,
    Quad2,
    Quad3,
    Quad4,
    Size,
    Orientation,
}

impl Concept {
    pub const ALL: [Concept; 6] = [
        Concept::Quad1,
        Concept::Quad2,
        Concept::Quad3,
        Concept::Quad4,
        Concept::Size,
        Concept::Orientation,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Concept> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Concept::Quad1 => "quad1",
            Concept::Quad2 => "quad2",
            Concept::Quad3 => "quad3",
            Concept::Quad4 => "quad4",
            Concept::Size => "size",
            Concept::Orientation => "orientation",
        }
    }
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Concept {
    type Err = QuadError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| QuadError::UnknownConcept(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectShape {
    Circle,
    Square,
    Pill,
    Triangle,
}

impl ObjectShape {
    pub const ALL: [ObjectShape; 4] = [
        ObjectShape::Circle,
        ObjectShape::Square,
        ObjectShape::Pill,
        ObjectShape::Triangle,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadLatents {
    pub quad: [f64; 4],
    pub size: f64,
    /// Fraction of a full turn.
    pub orientation: f64,
    pub object: f64,
    pub shape: ObjectShape,
}

impl QuadLatents {
    /// Value of an intervenable concept.
    pub fn concept(&self, c: Concept) -> f64 {
        match c {
            Concept::Quad1 => self.quad[0],
            Concept::Quad2 => self.quad[1],
            Concept::Quad3 => self.quad[2],
            Concept::Quad4 => self.quad[3],
            Concept::Size => self.size,
            Concept::Orientation => self.orientation,
        }
    }

    fn concept_mut(&mut self, c: Concept) -> &mut f64 {
        match c {
            Concept::Quad1 => &mut self.quad[0],
            Concept::Quad2 => &mut self.quad[1],
            Concept::Quad3 => &mut self.quad[2],
            Concept::Quad4 => &mut self.quad[3],
            Concept::Size => &mut self.size,
            Concept::Orientation => &mut self.orientation,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.quad
            .iter()
            .chain([&self.size, &self.orientation, &self.object])
            .all(|v| (0.0..=1.0).contains(v))
    }
}

/// A data-generating context: observational, or one or two intervened concepts.
///
/// Labels are `obs`, a concept name, or two names joined by `+` (an `_`
/// separator is also accepted on input).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContextId {
    targets: Vec<Concept>,
}

impl ContextId {
    pub fn obs() -> Self {
        Self { targets: Vec::new() }
    }

    pub fn single(c: Concept) -> Self {
        Self { targets: vec![c] }
    }

    pub fn pair(a: Concept, b: Concept) -> Result<Self> {
        if a == b {
            return Err(QuadError::BadContext {
                label: format!("{a}+{b}"),
                reason: "targets must differ".into(),
            });
        }
        let mut targets = vec![a, b];
        targets.sort();
        Ok(Self { targets })
    }

    pub fn targets(&self) -> &[Concept] {
        &self.targets
    }

    pub fn is_obs(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn label(&self) -> String {
        self.to_string()
    }

    /// The observational context followed by every single-target context.
    pub fn training_set() -> Vec<ContextId> {
        std::iter::once(Self::obs())
            .chain(Concept::ALL.into_iter().map(Self::single))
            .collect()
    }

    /// The seven held-out double-intervention contexts used for evaluation.
    pub fn eval_doubles() -> Vec<ContextId> {
        use Concept::*;
        [
            (Quad2, Quad3),
            (Quad1, Quad2),
            (Quad1, Quad4),
            (Quad2, Quad4),
            (Quad1, Quad3),
            (Size, Orientation),
            (Quad1, Size),
        ]
        .into_iter()
        .map(|(a, b)| Self::pair(a, b).expect("distinct targets"))
        .collect()
    }
}

impl fmt::Display for ContextId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.targets.as_slice() {
            [] => f.write_str("obs"),
            [a] => write!(f, "{a}"),
            [a, b] => write!(f, "{a}+{b}"),
            _ => unreachable!("at most two targets"),
        }
    }
}

impl FromStr for ContextId {
    type Err = QuadError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: &str| QuadError::BadContext {
            label: s.to_string(),
            reason: reason.to_string(),
        };
        if s == "obs" {
            return Ok(Self::obs());
        }
        let parts: Vec<&str> = s.split(['+', '_']).collect();
        let concepts = parts
            .iter()
            .map(|p| p.parse::<Concept>())
            .collect::<Result<Vec<_>>>()
            .map_err(|_| bad("expected obs or one or two of quad1..quad4, size, orientation"))?;
        match concepts.as_slice() {
            [a] => Ok(Self::single(*a)),
            [a, b] if a != b => Self::pair(*a, *b),
            [_, _] => Err(bad("targets must differ")),
            _ => Err(bad("at most two targets")),
        }
    }
}

impl Serialize for ContextId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ContextId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Draws latents for one image of a context.
///
/// Draw order is fixed (quad1..4, size, orientation, object, shape) so a
/// seeded generator yields the same latents on every platform.
pub fn sample_latents<R: Rng + ?Sized>(ctx: &ContextId, rng: &mut R) -> QuadLatents {
    let mut l = QuadLatents {
        quad: [0.0; 4],
        size: 0.0,
        orientation: 0.0,
        object: 0.0,
        shape: ObjectShape::Circle,
    };
    for c in Concept::ALL {
        *l.concept_mut(c) = if ctx.targets.contains(&c) {
            rng.random_range(0.5..=1.0)
        } else {
            rng.random_range(0.0..=0.5)
        };
    }
    l.object = rng.random_range(0.0..=1.0);
    l.shape = ObjectShape::ALL[rng.random_range(0..4)];
    l
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn labels_round_trip() {
        for s in ["obs", "quad1", "orientation", "quad1+quad4", "quad1+size"] {
            assert_eq!(s.parse::<ContextId>().unwrap().to_string(), s);
        }
        assert_eq!(
            "quad4_quad1".parse::<ContextId>().unwrap().to_string(),
            "quad1+quad4"
        );
    }

    #[test]
    fn bad_labels_rejected() {
        for s in ["", "object", "shape", "quad1+quad1", "quad1+quad2+quad3", "obs+quad1", "quad5"] {
            assert!(s.parse::<ContextId>().is_err(), "{s}");
        }
    }

    #[test]
    fn ranges_follow_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ctx: ContextId = "quad1+quad4".parse().unwrap();
        for _ in 0..200 {
            let l = sample_latents(&ctx, &mut rng);
            assert!(l.is_valid());
            for c in Concept::ALL {
                let v = l.concept(c);
                if ctx.targets().contains(&c) {
                    assert!(v >= 0.5);
                } else {
                    assert!(v <= 0.5);
                }
            }
        }
    }

    #[test]
    fn training_and_eval_sets() {
        assert_eq!(ContextId::training_set().len(), 7);
        let doubles = ContextId::eval_doubles();
        assert_eq!(doubles.len(), 7);
        assert!(doubles.iter().all(|c| c.targets().len() == 2));
    }
}
