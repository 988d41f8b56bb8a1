use crate::error::Result;
use crate::nn::{finite_diff_check, softmax_ce, GradReport};
use crate::tensor::Tensor;

use super::{McfrModel, Prepared};

/// Central-difference check of every trainable tensor that receives a
/// gradient for this sample, plus the 7-channel input (reported as
/// `"input"`). Each probe re-runs the full forward pass.
pub fn check_model_gradients(
    model: &McfrModel,
    input: &Prepared,
    label: usize,
    domain: usize,
    h: f64,
) -> Result<Vec<(String, GradReport)>> {
    let back = model.backward(input, label, domain)?;
    let loss = |m: &McfrModel, p: &Prepared| -> f64 {
        let logits = m.forward(p, domain).expect("shapes fixed by the unperturbed pass");
        softmax_ce(&logits, label).expect("label checked by backward").0
    };
    let mut out = Vec::new();
    model.for_each_param(|name, _, t| {
        let Some(g) = back.grads.get(name) else {
            return;
        };
        let r = finite_diff_check(
            |v| {
                let mut m = model.clone();
                m.for_each_param_mut(|n, _, t| {
                    if n == name {
                        t.data_mut().copy_from_slice(v);
                    }
                });
                loss(&m, input)
            },
            t.data(),
            g.data(),
            h,
        );
        out.push((name.to_string(), r));
    });
    let r = finite_diff_check(
        |v| {
            let p = Prepared {
                x7: Tensor::from_vec(input.x7.shape(), v.to_vec()).expect("same length"),
                f_uee: input.f_uee.clone(),
            };
            loss(model, &p)
        },
        input.x7.data(),
        back.input.data(),
        h,
    );
    out.push(("input".to_string(), r));
    Ok(out)
}
