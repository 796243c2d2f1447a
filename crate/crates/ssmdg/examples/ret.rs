use ssmdg::datagen::{make_task, strong_view_label_retention, TaskSpec};

fn main() {
    for (dims, sep, sigma) in [
        (48usize, 2.0, 0.7),
        (48, 2.0, 0.9),
        (48, 1.5, 0.7),
        (64, 2.0, 0.9),
        (64, 1.5, 0.7),
        (48, 1.5, 0.9),
        (64, 1.5, 0.9),
        (64, 1.2, 0.7),
    ] {
        let spec = TaskSpec {
            input_dims: vec![dims, dims],
            class_separation: sep,
            noise_sigma: sigma,
            domain_shift_scale: 12.0,
            modality_correlation: 1.0,
            ..TaskSpec::default()
        };
        let task = make_task(&spec).unwrap();
        let r = strong_view_label_retention(&task, 50, 123);
        println!("dims={dims} sep={sep} sigma={sigma}: retention={r:.4}");
    }
}
