//! A frozen, compositional category-embedding space standing in for a
//! pretrained text encoder. A category is a (shape, color) pair and embeds
//! as `normalize(shape_prototype + color_prototype)`, so unseen pairs of
//! seen attributes still land somewhere meaningful.

use std::fmt;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Category {
    pub shape: String,
    pub color: String,
}

impl Category {
    pub fn new(shape: impl Into<String>, color: impl Into<String>) -> Self {
        Self {
            shape: shape.into(),
            color: color.into(),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color, self.shape)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpace {
    d_text: usize,
    seed: u64,
    shapes: Vec<String>,
    colors: Vec<String>,
    shape_prototypes: Vec<Vec<f64>>,
    color_prototypes: Vec<Vec<f64>>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

impl CategorySpace {
    pub fn new(shapes: &[String], colors: &[String], d_text: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape_prototypes = shapes.iter().map(|_| unit_gaussian(&mut rng, d_text)).collect();
        let color_prototypes = colors.iter().map(|_| unit_gaussian(&mut rng, d_text)).collect();
        Self {
            d_text,
            seed,
            shapes: shapes.to_vec(),
            colors: colors.to_vec(),
            shape_prototypes,
            color_prototypes,
        }
    }

    pub fn d_text(&self) -> usize {
        self.d_text
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn shapes(&self) -> &[String] {
        &self.shapes
    }

    pub fn colors(&self) -> &[String] {
        &self.colors
    }

    /// Every (shape, color) pair, shape-major.
    pub fn all_categories(&self) -> Vec<Category> {
        self.shapes
            .iter()
            .flat_map(|s| self.colors.iter().map(move |c| Category::new(s, c)))
            .collect()
    }

    pub fn contains(&self, cat: &Category) -> bool {
        self.shapes.contains(&cat.shape) && self.colors.contains(&cat.color)
    }

    pub fn embed(&self, cat: &Category) -> Result<Vec<f64>> {
        let s = self
            .shapes
            .iter()
            .position(|x| *x == cat.shape)
            .ok_or_else(|| Error::UnknownCategory(cat.to_string()))?;
        let c = self
            .colors
            .iter()
            .position(|x| *x == cat.color)
            .ok_or_else(|| Error::UnknownCategory(cat.to_string()))?;
        Ok(normalize(
            self.shape_prototypes[s]
                .iter()
                .zip(&self.color_prototypes[c])
                .map(|(a, b)| a + b)
                .collect(),
        ))
    }

    /// Embeddings stacked as a `categories × d_text` matrix.
    pub fn embed_all(&self, cats: &[Category]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(cats.len() * self.d_text);
        for c in cats {
            data.extend(self.embed(c)?);
        }
        Ok(Tensor::from_vec(cats.len(), self.d_text, data))
    }

    /// SHA-256 of every prototype value.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.shape_prototypes.iter().chain(&self.color_prototypes) {
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// The prompts one image is classified against.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub categories: Vec<Category>,
    pub embeddings: Tensor,
    pub positive_mask: Vec<bool>,
}

impl PromptSet {
    /// All `categories` as positives, in the given order.
    pub fn fixed(space: &CategorySpace, categories: &[Category]) -> Result<Self> {
        Ok(Self {
            embeddings: space.embed_all(categories)?,
            categories: categories.to_vec(),
            positive_mask: vec![true; categories.len()],
        })
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn index_of(&self, cat: &Category) -> Option<usize> {
        self.categories.iter().position(|c| c == cat)
    }
}

/// Positives are the distinct ground-truth categories; negatives are drawn
/// uniformly without replacement from the rest of `label_space`. The final
/// order is shuffled by `rng`.
pub fn sample_prompts<R: Rng + ?Sized>(
    space: &CategorySpace,
    gt_categories: &[Category],
    label_space: &[Category],
    num_negatives: usize,
    rng: &mut R,
) -> Result<PromptSet> {
    let mut positives: Vec<Category> = Vec::new();
    for c in gt_categories {
        if !space.contains(c) {
            return Err(Error::UnknownCategory(c.to_string()));
        }
        if !positives.contains(c) {
            positives.push(c.clone());
        }
    }
    let mut rest: Vec<Category> = Vec::new();
    for c in label_space {
        if !positives.contains(c) && !rest.contains(c) {
            rest.push(c.clone());
        }
    }
    if num_negatives > rest.len() {
        return Err(Error::InsufficientLabelSpace {
            requested: num_negatives,
            available: rest.len(),
        });
    }
    let mut picked: Vec<(Category, bool)> = positives.into_iter().map(|c| (c, true)).collect();
    for i in index::sample(rng, rest.len(), num_negatives) {
        picked.push((rest[i].clone(), false));
    }
    picked.shuffle(rng);
    let categories: Vec<Category> = picked.iter().map(|p| p.0.clone()).collect();
    Ok(PromptSet {
        embeddings: space.embed_all(&categories)?,
        positive_mask: picked.iter().map(|p| p.1).collect(),
        categories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn space(seed: u64) -> CategorySpace {
        CategorySpace::new(
            &names(&["circle", "square", "triangle", "cross"]),
            &names(&["red", "green", "blue", "yellow"]),
            32,
            seed,
        )
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn embeddings_are_unit_norm_and_frozen() {
        let s = space(3);
        for c in s.all_categories() {
            let e = s.embed(&c).unwrap();
            assert!((cos(&e, &e) - 1.0).abs() < 1e-12);
            assert_eq!(e, s.embed(&c).unwrap());
        }
        assert_eq!(s.fingerprint(), space(3).fingerprint());
        assert!(matches!(
            s.embed(&Category::new("hexagon", "red")),
            Err(Error::UnknownCategory(_))
        ));
    }

    #[test]
    fn shared_attribute_pairs_are_closer() {
        let (mut same, mut diff) = (0.0, 0.0);
        for seed in 0..100 {
            let s = space(seed);
            let a = s.embed(&Category::new("circle", "red")).unwrap();
            let b = s.embed(&Category::new("circle", "blue")).unwrap();
            let c = s.embed(&Category::new("square", "blue")).unwrap();
            same += cos(&a, &b);
            diff += cos(&a, &c);
        }
        assert!(same / 100.0 > diff / 100.0);
    }

    #[test]
    fn prompt_sampling_contract() {
        let s = space(1);
        let all = s.all_categories();
        let gt = vec![all[0].clone(), all[5].clone(), all[0].clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = sample_prompts(&s, &gt, &all, 0, &mut rng).unwrap();
        assert_eq!(p.len(), 2);
        assert!(p.positive_mask.iter().all(|&m| m));

        let p = sample_prompts(&s, &gt, &all, 6, &mut rng).unwrap();
        assert_eq!(p.len(), 8);
        for (c, &pos) in p.categories.iter().zip(&p.positive_mask) {
            assert_eq!(pos, gt.contains(c));
        }
        let err = sample_prompts(&s, &gt, &all, 15, &mut rng).unwrap_err();
        assert!(matches!(err, Error::InsufficientLabelSpace { requested: 15, available: 14 }));
    }

    #[test]
    fn negatives_are_uniform() {
        let s = space(2);
        let all = s.all_categories();
        let gt = vec![all[3].clone()];
        let k = 4;
        let draws = 10_000;
        let mut counts = std::collections::HashMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..draws {
            let p = sample_prompts(&s, &gt, &all, k, &mut rng).unwrap();
            for (c, &pos) in p.categories.iter().zip(&p.positive_mask) {
                if !pos {
                    *counts.entry(c.clone()).or_insert(0usize) += 1;
                }
            }
        }
        let q = k as f64 / 15.0;
        let mean = draws as f64 * q;
        let sigma = (draws as f64 * q * (1.0 - q)).sqrt();
        assert_eq!(counts.len(), 15);
        for (c, n) in counts {
            assert!((n as f64 - mean).abs() < 3.0 * sigma, "{c}: {n} vs {mean}±{sigma}");
        }
    }
}
