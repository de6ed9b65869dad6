//! Five-method regression comparison at n = 5000. Slow; run with
//! `cargo test -p geolora --test full_scale -- --ignored`.

use geolora::harness::{run_comparison, toy_configs, Method};

#[test]
#[ignore = "n = 5000 takes minutes"]
fn toy_ordering_at_n_5000() {
    let cmp = run_comparison(&toy_configs(5000)).unwrap();
    let summary = |m: Method| {
        &cmp.runs
            .iter()
            .find(|r| r.summary.method == m)
            .unwrap()
            .summary
    };
    let geo = summary(Method::Geolora);
    let full = summary(Method::FullGd);
    let dlrt = summary(Method::Dlrt);
    let its =
        geo.iterations_to_threshold.unwrap() as f64 / full.iterations_to_threshold.unwrap() as f64;
    let evals = dlrt.evaluations_to_threshold.unwrap() as f64
        / geo.evaluations_to_threshold.unwrap() as f64;
    let ada = summary(Method::AdaloraLite).final_loss;
    let lora = summary(Method::LoraAb).final_loss / geo.final_loss;
    println!("iterations ratio {its:.3}, evaluation ratio {evals:.3}, adalora {ada:.3e}, lora/geolora {lora:.3e}");
    assert!(its <= 1.2);
    assert!(evals >= 1.8);
    assert!((1e-4..=1e-2).contains(&ada));
    assert!(lora >= 10.0);
}
