//! Plain LSTM classifier with no memory or write controller.
//!
//! Reads every frame and classifies the final hidden state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::FeatureSequence;
use crate::lstm::{lstm_step, LstmParams, LstmState};
use crate::model::{
    predict, ClassifierParams, Inference, ModelError, SampleGradients, SequenceModel,
};

pub const BASELINE_PARAM_NAMES: [&str; 5] = [
    "lstm.w_input",
    "lstm.w_hidden",
    "lstm.bias",
    "classifier.weight",
    "classifier.bias",
];

#[derive(Clone, Debug, PartialEq)]
pub struct VanillaLstm {
    pub lstm: LstmParams,
    pub classifier: ClassifierParams,
}

impl VanillaLstm {
    pub fn new(input_dim: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            lstm: LstmParams::init(input_dim, hidden, &mut rng),
            classifier: ClassifierParams::init(classes, hidden, &mut rng),
        }
    }

    fn run<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        seq: &FeatureSequence,
    ) -> Result<(Var, [Var; 5]), ModelError> {
        let d = self.lstm.input_dim();
        if seq.dim() != d {
            return Err(ModelError::FeatureDim {
                expected: d,
                got: seq.dim(),
            });
        }
        let vars = self.lstm.bind(tape);
        let w = tape.param(&self.classifier.weight);
        let b = tape.param(&self.classifier.bias);
        let mut state = LstmState::zeros(tape, self.lstm.hidden());
        for t in 0..seq.len() {
            let x = tape.constant(Tensor::vector(seq.frame(t).to_vec()));
            let (h, c) = lstm_step(tape, &vars, x, &state)?;
            state = LstmState { h, c };
        }
        let z = tape.matvec(w, state.h)?;
        let logits = tape.add(z, b)?;
        Ok((logits, [vars.w_input, vars.w_hidden, vars.bias, w, b]))
    }
}

impl SequenceModel for VanillaLstm {
    fn param_names(&self) -> &'static [&'static str] {
        &BASELINE_PARAM_NAMES
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.lstm.w_input,
            &self.lstm.w_hidden,
            &self.lstm.bias,
            &self.classifier.weight,
            &self.classifier.bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.lstm.w_input,
            &mut self.lstm.w_hidden,
            &mut self.lstm.bias,
            &mut self.classifier.weight,
            &mut self.classifier.bias,
        ]
    }

    fn sample_gradients(&self, seq: &FeatureSequence) -> Result<SampleGradients, ModelError> {
        let mut tape = Tape::new();
        let (logits, vars) = self.run(&mut tape, seq)?;
        let values = tape.value(logits).data().to_vec();
        let loss = tape.softmax_cross_entropy(logits, seq.label)?;
        let loss_value = tape.scalar(loss);
        tape.backward(loss)?;
        let grads = vars.iter().map(|&v| tape.take_grad(v)).collect();
        Ok(SampleGradients {
            loss: loss_value,
            inference: Inference {
                predicted: predict(&values),
                logits: values,
                write_rate: 1.0,
            },
            grads,
        })
    }

    fn infer(&self, seq: &FeatureSequence) -> Result<Inference, ModelError> {
        let mut tape = Tape::new();
        let (logits, _) = self.run(&mut tape, seq)?;
        let values = tape.value(logits).data().to_vec();
        Ok(Inference {
            predicted: predict(&values),
            logits: values,
            write_rate: 1.0,
        })
    }
}
