use cliffnet::tasks::{gen_hull, hull_batch, predict, train, TaskData, TrainConfig};
use cliffnet::Signature;

fn main() {
    let sig = Signature::new(3, 0, 0).unwrap();
    let train_s = gen_hull(301, 256, 3, 8, 0);
    let test_s = gen_hull(9301, 256, 3, 8, 0);
    let (x_train, y_train) = hull_batch(sig, &train_s).unwrap();
    let (x_test, y_test) = hull_batch(sig, &test_s).unwrap();
    let data = TaskData { x_train, y_train, x_test, y_test };
    let cfg = TrainConfig {
        seed: 7,
        epochs: 312,
        batch_size: 16,
        lr: 3e-3,
        channels: 16,
        depth: 3,
        lr_min: Some(1e-4),
        weight_decay: 0.5,
        scalar_gate_hidden: 16,
        stop_at_test_mse: None,
    };
    let result = train(sig, 8, &cfg, &data).unwrap();
    let last = result.metrics.last().unwrap();
    eprintln!("final train {:.4} test {:.4}", last.train_mse, last.test_mse);
    let (mean, std) = {
        let n = data.y_train.len() as f64;
        let m = data.y_train.data().iter().sum::<f64>() / n;
        let v = data.y_train.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        (m, v.sqrt())
    };
    let preds = predict(&result.model, &data.x_test, mean, std).unwrap();
    for (i, s) in test_s.iter().enumerate() {
        let flat: Vec<String> =
            s.points.iter().flat_map(|p| p.iter().map(|v| v.to_string())).collect();
        println!("{},{},{}", preds.data()[i], s.volume, flat.join(","));
    }
}
