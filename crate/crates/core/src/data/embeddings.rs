use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use gradkit::Tensor;
use rand::Rng;

use crate::data::vocab::{Vocabulary, PAD};
use crate::error::{Error, Result};

/// Half-width of the uniform interval for randomly initialized rows.
pub const INIT_RANGE: f32 = 0.25;

#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    /// `|V| x d` word table.
    pub words: Tensor<f32>,
    /// `|V_rel| x d` relation-level table.
    pub relations: Tensor<f32>,
    /// Number of word rows copied from a pretrained file.
    pub pretrained_hits: usize,
}

/// Reads a whitespace-separated `token v1 .. vd` file, keeping only tokens
/// accepted by `keep`. Every kept line must carry exactly `d` values.
pub fn read_pretrained(
    path: &Path,
    d: usize,
    mut keep: impl FnMut(&str) -> bool,
) -> Result<HashMap<String, Vec<f32>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<&str> = parts.collect();
        if values.len() != d {
            return Err(Error::Config(format!(
                "{}:{}: embedding for `{token}` has {} values, expected d = {d}",
                path.display(),
                i + 1,
                values.len()
            )));
        }
        if !keep(token) {
            continue;
        }
        let vec = values
            .iter()
            .map(|v| v.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                source_name: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        out.insert(token.to_string(), vec);
    }
    Ok(out)
}

fn uniform_table<R: Rng + ?Sized>(rows: usize, d: usize, rng: &mut R) -> Tensor<f32> {
    let data = (0..rows * d)
        .map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE))
        .collect();
    Tensor::new(vec![rows, d], data).expect("table shape")
}

/// Samples both tables uniformly, overwrites word rows found in the
/// pretrained file, and zeroes the padding row.
pub fn init_embeddings<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    d: usize,
    pretrained: Option<&Path>,
    rng: &mut R,
) -> Result<EmbeddingTables> {
    let mut words = uniform_table(vocab.n_words(), d, rng);
    let relations = uniform_table(vocab.n_relations(), d, rng);
    let mut pretrained_hits = 0;
    if let Some(path) = pretrained {
        let vectors = read_pretrained(path, d, |t| vocab.lookup_word(t).is_some())?;
        for (token, vec) in vectors {
            let row = vocab.word_id(&token) as usize;
            if row == PAD as usize {
                continue;
            }
            words.data_mut()[row * d..(row + 1) * d].copy_from_slice(&vec);
            pretrained_hits += 1;
        }
    }
    words.data_mut()[..d].fill(0.0);
    Ok(EmbeddingTables {
        words,
        relations,
        pretrained_hits,
    })
}
