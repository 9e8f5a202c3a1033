use super::encoder::{EncoderInput, Payload};
use super::SemiCausalModel;
use crate::error::{Error, Result};
use crate::masks::semicausal_flow;
use crate::numerics::{Real, Tensor};
use crate::spans::SpanLayout;
use crate::textdata::TokenId;

/// Which output rows moved when each input position was perturbed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowReport {
    pub n: usize,
    /// `moved[p * n + q]`: perturbing input `q` changed the logits of row `p`.
    pub moved: Vec<bool>,
    /// `(output p, input q)` pairs that moved although the reference relation
    /// forbids `p` from seeing `q`.
    pub violations: Vec<(usize, usize)>,
}

impl FlowReport {
    pub fn moved(&self, p: usize, q: usize) -> bool {
        self.moved[p * self.n + q]
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

const MAX_FLOW_LEN: usize = 64;

fn perturb_token(id: TokenId) -> TokenId {
    (id % 256 + 37) % 256
}

impl<T: Real> SemiCausalModel<T> {
    /// Perturbs every input position in turn and records which logit rows
    /// change at all, compared bit for bit against the unperturbed run.
    pub fn information_flow_check(
        &self,
        ids: &[TokenId],
        layout: &SpanLayout,
        docked: &[EncoderInput<T>],
    ) -> Result<FlowReport> {
        let n = ids.len();
        if n > MAX_FLOW_LEN {
            return Err(Error::Contract(format!(
                "flow check limited to {MAX_FLOW_LEN} positions, got {n}"
            )));
        }
        let oracle = semicausal_flow(layout)?;
        let run = |ids: &[TokenId], docked: &[EncoderInput<T>]| -> Result<Tensor<T>> {
            let mut s = self.session();
            let v = s.logits(ids, layout, docked)?;
            Ok(s.tape().value(v).clone())
        };
        let base = run(ids, docked)?;
        let mut moved = vec![false; n * n];
        let mut violations = Vec::new();
        for q in 0..n {
            let mut ids2 = ids.to_vec();
            let mut docked2 = docked.to_vec();
            match layout.span_at(q + 1) {
                Some(i) => {
                    let offset = q + 1 - layout.spans()[i].start;
                    match &mut docked2[i].payload {
                        Payload::Tokens(t) => t[offset] = perturb_token(t[offset]),
                        Payload::Features(f) => {
                            let w = f.cols();
                            f.data_mut()[offset * w..(offset + 1) * w]
                                .iter_mut()
                                .for_each(|v| *v += T::one());
                        }
                    }
                }
                None => ids2[q] = perturb_token(ids2[q]),
            }
            let out = run(&ids2, &docked2)?;
            for p in 0..n {
                if out.row(p) != base.row(p) {
                    moved[p * n + q] = true;
                    if !oracle.allows(p, q) {
                        violations.push((p, q));
                    }
                }
            }
        }
        Ok(FlowReport {
            n,
            moved,
            violations,
        })
    }
}
