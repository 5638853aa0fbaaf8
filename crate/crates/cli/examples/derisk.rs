//! Scratch harness for tuning the desk-scale schedule.

use std::time::Instant;

use semimultipose::runner::{train, TrainConfig};
use semimultipose_core::losses::LossWeights;
use semimultipose_core::model::ModelConfig;
use semimultipose_core::synth::{make_splits, DatasetSpec};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(600);
    let alpha: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let beta: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.0);

    let spec = DatasetSpec {
        n_labeled: 5,
        labeled_pool: 45,
        n_test: 16,
        seed: 0,
        split_seed: 0,
        ..DatasetSpec::default()
    };
    let data = make_splits(&spec).unwrap();
    let mut config = TrainConfig::desk(ModelConfig::default());
    config.lr = lr;
    config.total_iters = iters;
    config.eval_every = 50;
    config.weights = LossWeights {
        alpha,
        beta,
        ..LossWeights::standard()
    };
    config.fl_start_iter = (iters * 2 / 15).max(1);
    config.fu_start_iter = iters / 3;
    config.lr_decay_at = std::env::args().nth(5).map(|s| s.parse().unwrap()).unwrap_or(iters * 2 / 3);

    let t0 = Instant::now();
    match train(&config, &data, None, true) {
        Ok((params, record)) => {
            let dt = t0.elapsed().as_secs_f64();
            println!(
                "done in {dt:.1}s ({:.1} ms/iter), final AP {:.4}",
                1e3 * dt / iters as f64,
                record.final_ap
            );
            for e in &record.evals {
                println!("  iter {:5}  ap {:.4}", e.iter, e.ap);
            }

            // train-set AP + a dump of the first test frame's predictions
            use semimultipose::runner::{auto_nms_radius, evaluate_params, Prepared2};
            use semimultipose_core::fusion::DecodeConfig;
            use semimultipose_core::targets::Instance;
            let stride = config.model.stride;
            let to_grid = |insts: &Vec<Instance>| -> Vec<Instance> {
                insts
                    .iter()
                    .map(|i| {
                        Instance::new(
                            i.keypoints
                                .iter()
                                .map(|&[r, c]| [r / stride as f64, c / stride as f64])
                                .collect(),
                        )
                    })
                    .collect()
            };
            let grid_l: Vec<Vec<Instance>> = data
                .labeled
                .iter()
                .map(|s| to_grid(s.instances.as_ref().unwrap()))
                .collect();
            let radius = config.nms_radius.unwrap_or_else(|| auto_nms_radius(&grid_l));
            let decode = DecodeConfig::new(config.weights.delta, radius, config.top_n).unwrap();
            let train_set = Prepared2 {
                images: data.labeled.iter().map(|s| s.image.clone()).collect(),
                pixel_instances: data
                    .labeled
                    .iter()
                    .map(|s| s.instances.clone().unwrap())
                    .collect(),
            };
            let (train_report, _) =
                evaluate_params(&params, &train_set, &decode, config.sigma2).unwrap();
            println!("train AP {:.4} (nms radius {:.2})", train_report.ap, radius);

            let test_set = Prepared2 {
                images: data.test.iter().map(|s| s.image.clone()).collect(),
                pixel_instances: data
                    .test
                    .iter()
                    .map(|s| s.instances.clone().unwrap())
                    .collect(),
            };
            let (test_report, preds) =
                evaluate_params(&params, &test_set, &decode, config.sigma2).unwrap();
            println!("test AP {:.4}", test_report.ap);
            for mult in [1.5, 2.0, 2.5] {
                let d2 = DecodeConfig::new(config.weights.delta, radius * mult, config.top_n)
                    .unwrap();
                let (r2, _) = evaluate_params(&params, &test_set, &d2, config.sigma2).unwrap();
                println!("test AP {:.4} at radius x{mult}", r2.ap);
            }
            let gt = &test_set.pixel_instances[0];
            println!("frame 0: {} gt instances", gt.len());
            for inst in gt {
                println!("  gt  {:?}", inst.keypoints.iter().map(|k| (k[0].round(), k[1].round())).collect::<Vec<_>>());
            }
            for (i, inst) in preds[0].instances.iter().enumerate().take(8) {
                println!(
                    "  pred score {:.3} {:?}",
                    preds[0].scores[i],
                    inst.keypoints.iter().map(|k| (k[0].round(), k[1].round())).collect::<Vec<_>>()
                );
            }
        }
        Err(e) => println!("FAILED: {e}"),
    }
}
