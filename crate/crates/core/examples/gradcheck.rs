//! Finite-difference check of the full network on a tiny configuration.

use parsrec::model::{init_model, ModelConfig, ParsRecModel};
use parsrec::numerics::gradcheck::check_gradients;
use parsrec::rng::{stream, Purpose};

fn main() -> parsrec::Result<()> {
    let cfg = ModelConfig {
        n_items: 6,
        d_u: 4,
        d_v: 4,
        heads: 2,
        ..ModelConfig::default()
    };
    let mut m: ParsRecModel<f64> = init_model(&cfg, 2, &mut stream(5, Purpose::ModelInit, 0))?;
    // Shift the biases so no ReLU input sits exactly on the kink.
    let mut rng = stream(1, Purpose::Analysis, 0);
    let biases: Vec<_> = m
        .params
        .iter()
        .filter(|(_, p)| p.value.shape().len() == 1)
        .map(|(id, _)| id)
        .collect();
    for id in biases {
        for v in m.params.value_mut(id).data_mut() {
            *v += rand::Rng::random_range(&mut rng, -0.3..0.3);
        }
    }
    let arch = m.arch.clone();
    let eob = arch.eob();
    let report = check_gradients(
        &mut m.params,
        |g| {
            let mut rng = stream(0, Purpose::Dropout, 0);
            let un = arch.unroll_fixed(
                g,
                &[0, 1],
                &[vec![1, 2], vec![]],
                &[vec![3, 0, 5], vec![2, eob, eob]],
                false,
                false,
                &mut rng,
            )?;
            arch.session_loss(g, &un)
        },
        1e-6,
    )?;
    println!(
        "checked {} entries, max relative error {:.3e} at {}[{}]",
        report.checked, report.max_rel_err, report.worst_param, report.worst_index
    );
    Ok(())
}
