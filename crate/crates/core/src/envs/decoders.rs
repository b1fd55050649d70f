use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::BlockMdp;
use crate::policy::Decoder;
use crate::rng::SeedStream;

/// A finite, realizable decoder class. `true_index` is for tests and
/// diagnostics; the learners never read it.
#[derive(Clone, Debug)]
pub struct DecoderClass {
    pub decoders: Vec<Arc<Decoder>>,
    pub true_index: Option<usize>,
}

impl DecoderClass {
    pub fn singleton(decoder: Decoder) -> Self {
        Self { decoders: vec![Arc::new(decoder)], true_index: Some(0) }
    }

    pub fn len(&self) -> usize {
        self.decoders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decoders.is_empty()
    }

    pub fn contains(&self, decoder: &Decoder) -> bool {
        self.decoders.iter().any(|d| d.as_ref() == decoder)
    }
}

/// `{φ⋆}` plus `n_decoys` corrupted copies, shuffled. Each decoy relabels
/// `ceil(rate · |X|)` observations (drawn among those whose layer has at
/// least two states) to a different state of the same layer.
pub fn make_decoder_class(model: &BlockMdp, n_decoys: usize, rate: f64, seed: u64) -> Result<DecoderClass> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!("corruption rate {rate} is outside [0, 1]")));
    }
    let truth = Decoder::from_model(model);
    let corruptible: Vec<usize> = (0..model.num_observations())
        .filter(|&x| model.layer_size(model.obs_layer(x)) >= 2)
        .collect();
    let count = ((rate * model.num_observations() as f64).ceil() as usize).min(corruptible.len());
    let stream = SeedStream::new(seed);
    let mut class = vec![truth.clone()];
    for k in 0..n_decoys {
        let mut rng = stream.derive("decoys", k as u64).rng();
        let mut labels = truth.labels().to_vec();
        for &x in corruptible.choose_multiple(&mut rng, count) {
            let n = model.layer_size(model.obs_layer(x));
            let shift = rng.random_range(1..n);
            labels[x] = (labels[x] + shift) % n;
        }
        class.push(Decoder::new(labels));
    }
    let mut order: Vec<usize> = (0..class.len()).collect();
    order.shuffle(&mut stream.derive("shuffle", 0).rng());
    let true_index = order.iter().position(|&k| k == 0);
    Ok(DecoderClass {
        decoders: order.into_iter().map(|k| Arc::new(class[k].clone())).collect(),
        true_index,
    })
}
