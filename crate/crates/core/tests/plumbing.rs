mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::tree::{output_hashes, tree_hashes};
use ofhrl::agents::{bc_train, BcConfig, BcPolicy, OptionSet, UofAgent};
use ofhrl::cvae::LatentCodec;
use ofhrl::data::{compute_norm_stats, read_dataset, write_dataset};
use ofhrl::env::{behavior_rollout, EnvName, GripperChain, HighGoal, PolicyGrade};
use ofhrl::nn::{checkpoint, Activation, Mlp};
use ofhrl::pipeline::{self, RunConfig};
use ofhrl::world::WorldModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

fn bytes(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

/// Every file under `dir` with its hash, keyed by relative path.
#[test]
fn dataset_file_round_trip_is_bit_exact() {
    let tmp = tempdir().unwrap();
    let env = GripperChain::new(HighGoal::ReturnHome);
    let data = behavior_rollout(&env, PolicyGrade::MediumExpert, 3000, 4).unwrap();
    let a = tmp.path().join("a.ofds");
    let b = tmp.path().join("b.ofds");
    write_dataset(&data, &a).unwrap();
    let back = read_dataset(&a).unwrap();
    assert_eq!(back, data);
    write_dataset(&back, &b).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
}

#[test]
fn network_checkpoint_round_trip_is_bit_exact() {
    let tmp = tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = Mlp::with_hidden(7, &[13, 5], 3, Activation::Tanh, Activation::Identity, &mut rng).unwrap();
    let p = tmp.path().join("net.ofnn");
    checkpoint::save(&net, &p).unwrap();
    let back = checkpoint::load(&p).unwrap();
    assert_eq!(back, net);
    for (x, y) in back.parameters().iter().zip(net.parameters()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn agent_checkpoints_round_trip_bit_exact() {
    let tmp = tempdir().unwrap();
    let env = GripperChain::new(HighGoal::ReturnHome);
    let data = behavior_rollout(&env, PolicyGrade::MediumExpert, 2000, 5).unwrap();
    let norm = compute_norm_stats(&data).unwrap().state;
    let spec = ofhrl::env::Environment::spec(&env).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let options = OptionSet::new(3, 3, &[16, 16], norm.clone(), -0.5, &mut rng).unwrap();
    options.save(&tmp.path().join("o1"), "moc", true).unwrap();
    let (loaded, kind, latent) = OptionSet::load(&tmp.path().join("o1")).unwrap();
    assert_eq!((kind.as_str(), latent), ("moc", true));
    loaded.save(&tmp.path().join("o2"), "moc", true).unwrap();
    assert_eq!(tree_hashes(&tmp.path().join("o1")), tree_hashes(&tmp.path().join("o2")));

    let uof = UofAgent::new(3, 5, &[16, 16], norm, &spec.action_low, &spec.action_high, Some(2.0), 10, &mut rng).unwrap();
    uof.save(&tmp.path().join("u1")).unwrap();
    UofAgent::load(&tmp.path().join("u1")).unwrap().save(&tmp.path().join("u2")).unwrap();
    assert_eq!(tree_hashes(&tmp.path().join("u1")), tree_hashes(&tmp.path().join("u2")));

    let cfg = BcConfig {
        hidden: vec![16],
        epochs: 1,
        ..BcConfig::default()
    };
    let (bc, _) = bc_train(&data, &spec.action_low, &spec.action_high, &cfg).unwrap();
    bc.save(&tmp.path().join("b1")).unwrap();
    BcPolicy::load(&tmp.path().join("b1")).unwrap().save(&tmp.path().join("b2")).unwrap();
    assert_eq!(tree_hashes(&tmp.path().join("b1")), tree_hashes(&tmp.path().join("b2")));
}

fn tiny_corridor(tmp: &Path, out: &str) -> RunConfig {
    let mut cfg = RunConfig::new(EnvName::CorridorForward);
    cfg.dataset = tmp.join("data.ofds");
    cfg.world.hidden = vec![16, 16];
    cfg.world.reward_hidden = vec![16];
    cfg.world.members = 3;
    cfg.world.epochs = 2;
    cfg.world.learning_rate = 1e-3;
    cfg.codec.hidden = vec![16, 16];
    cfg.codec.epochs = 2;
    cfg.codec.learning_rate = 1e-3;
    cfg.codec.kl_weight = 0.05;
    cfg.agent_hidden = vec![16];
    cfg.moc.total_steps = 2048;
    cfg.moc.rollout_steps = 1024;
    cfg.moc.epochs = 2;
    cfg.eval_episodes = 2;
    cfg.eval_every = 1;
    cfg.seeds = vec![0, 1];
    cfg.out = tmp.join(out);
    cfg
}

#[test]
fn identical_run_configs_reproduce_identical_outputs() {
    let tmp = tempdir().unwrap();
    let t = tmp.path();
    let d1 = pipeline::gen_data(EnvName::CorridorForward, PolicyGrade::Medium, 3000, 7, &t.join("data.ofds")).unwrap();
    let d2 = pipeline::gen_data(EnvName::CorridorForward, PolicyGrade::Medium, 3000, 7, &t.join("again.ofds")).unwrap();
    assert_eq!(d1.sha256, d2.sha256);

    let mut hashes = Vec::new();
    for run in ["r1", "r2"] {
        let mut world_cfg = tiny_corridor(t, &format!("{run}_world"));
        pipeline::train_world_cmd(&world_cfg).unwrap();
        world_cfg.world_dir = Some(world_cfg.out.clone());
        world_cfg.out = t.join(format!("{run}_agent"));
        pipeline::train_agent_cmd(&world_cfg).unwrap();
        let h = output_hashes(&[t.join(format!("{run}_world")), t.join(format!("{run}_agent"))]);
        hashes.push(h);
    }
    assert!(hashes[0].len() > 10);
    assert_eq!(hashes[0], hashes[1]);

    // the stored config reproduces itself
    let stored = RunConfig::read(&t.join("r1_agent").join("run.cfg")).unwrap();
    assert_eq!(stored.world_dir, Some(t.join("r1_world")));
    let world = WorldModel::load(&t.join("r1_world").join("world")).unwrap();
    world.save(&t.join("resaved")).unwrap();
    assert_eq!(tree_hashes(&t.join("r1_world").join("world")), tree_hashes(&t.join("resaved")));
    let codec = LatentCodec::load(&t.join("r1_world").join("codec")).unwrap();
    codec.save(&t.join("codec_resaved")).unwrap();
    assert_eq!(tree_hashes(&t.join("r1_world").join("codec")), tree_hashes(&t.join("codec_resaved")));
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ofhrl")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn command_line_pipeline_end_to_end() {
    let tmp = tempdir().unwrap();
    let t = |name: &str| tmp.path().join(name).display().to_string();
    let cfg_path = t("tiny.cfg");
    fs::write(
        &cfg_path,
        "world.hidden=16,16\nworld.reward_hidden=16\nworld.members=3\nworld.epochs=2\nworld.learning_rate=0.001\n\
         cvae.hidden=16,16\ncvae.epochs=2\ncvae.kl_weight=0.05\nagent_hidden=16\neval_episodes=2\n\
         moc.total_steps=2048\nmoc.rollout_steps=1024\nmoc.epochs=2\nflat.total_steps=2048\nflat.rollout_steps=1024\n\
         uof.episodes=20\nuof.report_every=10\nuof.updates_per_episode=2\n",
    )
    .unwrap();

    let stdout = ok(&["gen-data", "--env", "corridor-forward", "--grade", "medium", "--n", "3000", "--out", &t("c.ofds")]);
    assert!(stdout.contains("sha256"));
    ok(&["train-world", "--config", &cfg_path, "--env", "corridor-forward", "--data", &t("c.ofds"), "--out", &t("cw")]);
    assert!(Path::new(&t("cw")).join("threshold.txt").is_file());
    assert!(Path::new(&t("cw")).join("world_validation.csv").is_file());
    for agent in ["moc", "flat", "bc"] {
        let out = t(&format!("c_{agent}"));
        ok(&[
            "train-agent", "--config", &cfg_path, "--env", "corridor-forward", "--data", &t("c.ofds"), "--world", &t("cw"),
            "--agent", agent, "--seeds", "0", "--out", &out,
        ]);
        let curve = fs::read_to_string(Path::new(&out).join("seed_0").join("curve.csv")).unwrap();
        assert!(curve.lines().count() > 1);
        ok(&["eval", "--agent", &out, "--env", "corridor-forward", "--episodes", "3", "--csv", &t(&format!("{agent}.csv"))]);
    }
    let header = fs::read_to_string(t("moc.csv")).unwrap();
    assert!(header.starts_with("run,episode,return,normalized_score"));
    assert_eq!(header.lines().count(), 4);
    let stdout = ok(&[
        "transfer", "--agent", &format!("{}/seed_0/agent", t("c_moc")), "--env", "corridor-backward", "--steps", "2048",
        "--out", &t("moved"),
    ]);
    assert!(stdout.contains("pre-transfer return"));
    assert!(Path::new(&t("moved")).join("transfer.csv").is_file());
    ok(&["eval", "--agent", &t("moved"), "--env", "corridor-backward", "--episodes", "2", "--csv", &t("moved.csv")]);

    ok(&["gen-data", "--env", "gripper-chain", "--grade", "medium_expert", "--n", "2000", "--out", &t("g.ofds")]);
    ok(&["train-world", "--config", &cfg_path, "--env", "gripper-chain", "--data", &t("g.ofds"), "--out", &t("gw")]);
    ok(&[
        "train-agent", "--config", &cfg_path, "--env", "gripper-chain", "--data", &t("g.ofds"), "--world", &t("gw"),
        "--seeds", "0", "--out", &t("g_uof"),
    ]);
    ok(&[
        "options-trace", "--agent", &format!("{}/seed_0/agent", t("g_uof")), "--env", "gripper-chain", "--goal", "2",
        "--episodes", "4", "--csv", &t("trace.csv"),
    ]);
    let trace = fs::read_to_string(t("trace.csv")).unwrap();
    for row in trace.lines().skip(1) {
        let sum: f64 = row.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!(sum == 0.0 || (sum - 1.0).abs() < 1e-9, "row {row}");
    }
    let stdout = ok(&["eval", "--agent", &t("g_uof"), "--env", "gripper-chain", "--episodes", "3", "--csv", &t("g.csv")]);
    assert!(stdout.contains("normalized"));
    let header = fs::read_to_string(t("g.csv")).unwrap();
    assert!(header.lines().next().unwrap().ends_with("success_0,success_1,success_2"));
}

#[test]
fn command_line_errors_exit_nonzero_with_a_diagnostic() {
    let tmp = tempdir().unwrap();
    let missing = tmp.path().join("missing.ofds").display().to_string();
    let out = cli(&["train-world", "--env", "corridor-forward", "--data", &missing, "--out", &missing]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = cli(&["train-world", "--set", "world.no_such_key=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let out = cli(&["gen-data", "--env", "nowhere", "--grade", "medium", "--out", &missing]);
    assert!(!out.status.success());
}
