use rand::seq::SliceRandom;

use super::Corpus;
use crate::error::{Error, Result};
use crate::model::{RegionSet, TokenSeq};
use crate::numerics::rng::{stream, Stream};

pub const PAD_TOKEN: usize = 0;

/// Image `k` is paired with caption `k`; everything else is a negative.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Vec<usize>,
    /// Caption index within each image's caption list.
    pub captions: Vec<usize>,
    /// Padded to the largest region count in the batch.
    pub regions: Vec<RegionSet<f32>>,
    /// Padded to the longest caption in the batch.
    pub tokens: Vec<TokenSeq>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Deterministic epoch iteration over one positive pair per image.
#[derive(Clone, Debug)]
pub struct Batcher<'a> {
    corpus: &'a Corpus,
    batch_size: usize,
    seed: u64,
}

impl<'a> Batcher<'a> {
    pub fn new(corpus: &'a Corpus, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Config(format!("batch size {batch_size} leaves no negatives")));
        }
        Ok(Self {
            corpus,
            batch_size,
            seed,
        })
    }

    /// Image visiting order for `epoch`.
    pub fn order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.corpus.len()).collect();
        order.shuffle(&mut stream(self.seed, Stream::Shuffle(epoch)));
        order
    }

    /// Number of batches per epoch; a trailing batch of one item is dropped.
    pub fn batches_per_epoch(&self) -> usize {
        let n = self.corpus.len();
        n / self.batch_size + usize::from(n % self.batch_size >= 2)
    }

    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Batch> + '_ {
        let order = self.order(epoch);
        let count = self.batches_per_epoch();
        let size = self.batch_size;
        (0..count).map(move |b| {
            let images = order[b * size..((b + 1) * size).min(order.len())].to_vec();
            self.assemble(images, epoch)
        })
    }

    fn assemble(&self, images: Vec<usize>, epoch: u64) -> Batch {
        let c = self.corpus;
        let captions: Vec<usize> = images
            .iter()
            .map(|&i| (epoch % c.item(i).captions.len() as u64) as usize)
            .collect();
        let max_n = images.iter().map(|&i| c.regions[i].len()).max().unwrap_or(0);
        let seqs: Vec<TokenSeq> = images.iter().zip(&captions).map(|(&i, &k)| c.token_seq(i, k)).collect();
        let max_m = seqs.iter().map(TokenSeq::len).max().unwrap_or(0);
        Batch {
            regions: images.iter().map(|&i| c.regions[i].padded_to(max_n)).collect(),
            tokens: seqs.iter().map(|s| s.padded_to(max_m, PAD_TOKEN)).collect(),
            images,
            captions,
        }
    }
}
