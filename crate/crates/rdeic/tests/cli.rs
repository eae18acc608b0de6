//! End-to-end exercise of the `rrd` binary.

use std::path::Path;
use std::process::Command;

fn rrd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rrd"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn rrd");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_cli_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // corpus
    run_ok(rrd()
        .arg("gen-corpus")
        .args(["--out", &d.join("imgs").to_string_lossy()])
        .args(["--count", "12", "--size", "32", "--seed", "5"]));
    assert!(d.join("imgs/0000.png").exists());

    // config scaled down hard so the test stays fast
    let cfg = rdeic::config::TrainConfig {
        topology: rdeic::nn::models::Topology::tiny(),
        image_size: 16,
        schedule: rdeic::schedule::ScheduleConfig {
            steps: 100,
            relay_n: 30,
            ..rdeic::schedule::ScheduleConfig::default()
        },
        batch_size: 2,
        corpus_train: 8,
        corpus_heldout: 2,
        ae_iters: 30,
        base_iters: 20,
        stage1_phase1_iters: 5,
        stage1_phase2_iters: 10,
        stage2_iters: 5,
        l_steps: 2,
        log_every: 10_000,
        ..rdeic::config::TrainConfig::default()
    };
    cfg.save(&d.join("train.toml")).unwrap();

    // stage 1 (pretrains automatically), then stage 2
    run_ok(rrd()
        .arg("train")
        .args(["--config", &d.join("train.toml").to_string_lossy()])
        .args(["--stage", "1"])
        .args(["--out", &d.join("s1.rdck").to_string_lossy()]));
    assert!(d.join("s1.rdck").exists());
    assert!(d.join("s1.log.jsonl").exists());

    run_ok(rrd()
        .arg("train")
        .args(["--config", &d.join("train.toml").to_string_lossy()])
        .args(["--stage", "2"])
        .args(["--init", &d.join("s1.rdck").to_string_lossy()])
        .args(["--out", &d.join("s2.rdck").to_string_lossy()]));

    // metrics log is JSON lines with finite totals
    let log = std::fs::read_to_string(d.join("s1.log.jsonl")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["total"].as_f64().unwrap().is_finite());
    }

    // generate a test image that needs padding
    let odd = rdeic::corpus::generate_corpus(77, 1, 19).remove(0);
    rdeic::corpus::save_image(&d.join("odd.png"), &odd).unwrap();

    // compress / decompress round trip through files
    run_ok(rrd()
        .arg("compress")
        .arg(d.join("odd.png"))
        .args(["-o", &d.join("odd.rrd").to_string_lossy()])
        .args(["--model", &d.join("s2.rdck").to_string_lossy()]));
    run_ok(rrd()
        .arg("decompress")
        .arg(d.join("odd.rrd"))
        .args(["-o", &d.join("odd.out.png").to_string_lossy()])
        .args(["--model", &d.join("s2.rdck").to_string_lossy()])
        .args(["--steps", "5", "--lambda-s", "1.2"]));
    let recon = rdeic::corpus::load_image(&d.join("odd.out.png")).unwrap();
    assert_eq!(recon.dim(), odd.dim());

    // eval over the corpus with a small grid
    std::fs::write(
        d.join("grid.toml"),
        format!(
            "models = [{:?}]\nl_values = [2]\nlambda_s_values = [0.0, 1.0]\nout_dir = {:?}\n",
            d.join("s2.rdck").to_string_lossy(),
            d.join("eval").to_string_lossy()
        ),
    )
    .unwrap();
    // eval corpus must be padded-size compatible with MS-SSIM's window
    run_ok(rrd()
        .arg("gen-corpus")
        .args(["--out", &d.join("eval_imgs").to_string_lossy()])
        .args(["--count", "2", "--size", "32", "--seed", "6"]));
    run_ok(rrd()
        .arg("eval")
        .arg(d.join("eval_imgs"))
        .args(["--grid", &d.join("grid.toml").to_string_lossy()]));
    let csv = std::fs::read_to_string(d.join("eval/metrics.csv")).unwrap();
    assert!(csv.lines().count() >= 5, "csv:\n{csv}");
    assert!(Path::new(&d.join("eval")).join("0000.png.bits.png").exists());

    // decoding with the wrong model must fail loudly
    let out = rrd()
        .arg("decompress")
        .arg(d.join("odd.rrd"))
        .args(["-o", &d.join("bad.png").to_string_lossy()])
        .args(["--model", &d.join("s1.rdck").to_string_lossy()])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
