//! Trains image-mode configurations without recording traces and reports
//! test accuracy per task, for choosing a learning rate.
//!
//! ```text
//! cargo run --release --example lr_sweep -- DATA_DIR MODE SEED LR [LR...]
//! ```

use std::time::Instant;

use dualform::config::RunConfig;
use dualform::dataio::{make_stream, Split};
use dualform::nn::{accuracy, train_mlp, MlpModel};
use dualform::pipeline::{load_images, stream_seed};

fn main() -> dualform::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 4 {
        eprintln!("usage: lr_sweep DATA_DIR MODE SEED LR [LR...]");
        std::process::exit(2);
    }
    let mut cfg = RunConfig::defaults(args[1].parse()?);
    cfg.data_dir = args[0].clone().into();
    let seed: u64 = args[2].parse().expect("seed");
    let train = load_images(&cfg, Split::Train)?;
    let test = load_images(&cfg, Split::Test)?;
    for lr in &args[3..] {
        let lr: f32 = lr.parse().expect("learning rate");
        let mut dims = vec![784];
        dims.extend(&cfg.hidden_dims);
        dims.push(10);
        let mut model = MlpModel::new(&dims, seed)?;
        let stream = make_stream(&train, cfg.schedule.clone(), cfg.batch_size, stream_seed(seed))?;
        let start = Instant::now();
        let boundaries: Vec<usize> = cfg
            .schedule
            .0
            .iter()
            .scan(0, |acc, p| {
                *acc += p.steps;
                Some(*acc)
            })
            .collect();
        train_mlp(&mut model, &train, stream, lr, &mut [], |m, r| {
            if boundaries.contains(&(r.step as usize + 1)) {
                let mut line = format!("lr {lr} step {}", r.step + 1);
                for (t, set) in &test {
                    line += &format!(" task{t} {:.4}", accuracy(m, set)?);
                }
                println!("{line}");
            }
            Ok(())
        })?;
        println!("lr {lr}: {:.0} s", start.elapsed().as_secs_f64());
    }
    Ok(())
}
