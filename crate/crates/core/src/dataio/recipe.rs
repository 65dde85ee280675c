//! Seeded draw of an RFT training stream from a labelled pool.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DataError;
use crate::microworld::scene::{Label, Scenario};
use crate::training::rft::{RecipeStream, RftRecipe};

fn draw(pool: &[usize], n: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
    if n <= pool.len() {
        let mut p = pool.to_vec();
        p.shuffle(rng);
        p.truncate(n);
        (p, false)
    } else {
        // every pool member once, then with replacement
        let mut p = pool.to_vec();
        p.shuffle(rng);
        while p.len() < n {
            p.push(pool[rng.gen_range(0..pool.len())]);
        }
        (p, true)
    }
}

/// Warm-up positives first, then the mixed set shuffled. Positives for the
/// warm-up and the mix are drawn jointly, so they only repeat once the pool is
/// exhausted.
pub fn sample_recipe(data: &[Scenario], recipe: &RftRecipe) -> Result<RecipeStream, DataError> {
    if recipe.total() == 0 {
        return Err(DataError::Recipe("empty recipe".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let pool = |l: Label| -> Vec<usize> { (0..data.len()).filter(|&i| data[i].label == l).collect() };
    let mut with_replacement = Vec::new();
    let mut pick = |label: Label, n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<usize>, DataError> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let p = pool(label);
        if p.is_empty() {
            return Err(DataError::Recipe(format!("recipe asks for {n} {} samples, dataset has none", label.name())));
        }
        let (v, repl) = draw(&p, n, rng);
        if repl {
            log::warn!("{} pool has {} samples, drawing {n} with replacement", label.name(), p.len());
            with_replacement.push(label.name().to_string());
        }
        Ok(v)
    };
    let pos = pick(Label::Positive, recipe.warmup + recipe.positive, &mut rng)?;
    let neg = pick(Label::Negative, recipe.negative, &mut rng)?;
    let rec = pick(Label::Recovery, recipe.recovery, &mut rng)?;
    let mut indices: Vec<usize> = pos[..recipe.warmup].to_vec();
    let mut mixed: Vec<usize> = pos[recipe.warmup..].to_vec();
    mixed.extend(neg);
    mixed.extend(rec);
    mixed.shuffle(&mut rng);
    indices.extend(mixed);
    Ok(RecipeStream { indices, warmup: recipe.warmup, with_replacement })
}
