use std::path::Path;

use difftt::checkpoint;
use difftt::io::{assemble, format_cascades, format_graph, load_dataset_dir, parse_cascades, parse_graph, write_dataset_dir};
use difftt::{Error, RunConfig};
use difftt_core::data::{generate_synthetic, Dataset, SynthConfig};
use difftt_core::model::{ModelConfig, ModelState, Phase};

fn small_dataset() -> Dataset {
    let cfg = SynthConfig {
        n_users: 30,
        n_cascades: 20,
        seed: 3,
        ..SynthConfig::default()
    };
    let (g, c) = generate_synthetic(&cfg).unwrap();
    Dataset::identity_labeled(g, c)
}

#[test]
fn dataset_round_trips_through_text() {
    let ds = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    write_dataset_dir(&ds, dir.path()).unwrap();
    let (back, report) = load_dataset_dir(dir.path(), false).unwrap();
    assert_eq!(report.dropped_duplicates, 0);
    assert_eq!(back.cascades, ds.cascades);
    assert_eq!(back.graph.edges(), ds.graph.edges());
    assert_eq!(format_cascades(&back), format_cascades(&ds));
    assert_eq!(format_graph(&back), format_graph(&ds));
}

#[test]
fn sparse_labels_are_reindexed_densely() {
    let p = Path::new("c.txt");
    let raw = parse_cascades("# comment\na\t900,0 17,1.5\n\nb\t17,0 5,2\n", p).unwrap();
    let edges = parse_graph("5 900\n17 42\n", Path::new("g.txt")).unwrap();
    let (ds, rep) = assemble(&raw, &edges, false, p).unwrap();
    assert_eq!(ds.user_labels, vec![5, 17, 42, 900]);
    assert_eq!(rep.graph_only_users, 1);
    assert_eq!(ds.cascades[0].users(), vec![3, 1]);
    assert_eq!(ds.cascades[1].users(), vec![1, 0]);
}

#[test]
fn repeated_adopters_are_dropped_with_a_count() {
    let p = Path::new("c.txt");
    let raw = parse_cascades("a\t1,0 2,1 1,2 3,3\n", p).unwrap();
    let (ds, rep) = assemble(&raw, &[], false, p).unwrap();
    assert_eq!(rep.dropped_duplicates, 1);
    assert_eq!(ds.cascades[0].len(), 3);
}

fn parse_error_line(text: &str) -> (usize, String) {
    match parse_cascades(text, Path::new("c.txt")) {
        Err(Error::Parse { line, msg, .. }) => (line, msg),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn malformed_cascade_lines_report_their_line() {
    let (line, msg) = parse_error_line("a\t1,0 2,1\nb\t1,3 2,1\n");
    assert_eq!(line, 2);
    assert!(msg.contains("non-monotone timestamps at event 1"), "{msg}");
    assert_eq!(parse_error_line("a\t1,0\n\na\t2,0\n").0, 3);
    assert!(parse_error_line("a\t1,-1\n").1.contains("non-negative"));
    assert!(parse_error_line("a\tx,0\n").1.contains("bad user id"));
    assert!(parse_error_line("a 1,0\n").1.contains("<id>"));
    let e = parse_graph("1 2\n3\n", Path::new("g.txt")).unwrap_err();
    assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
}

fn trained_like_state() -> ModelState {
    let mut s = ModelState::new(ModelConfig::new(12, 3), 5).unwrap();
    s.enter_phase(Phase::Meta);
    s
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let s = trained_like_state();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    checkpoint::save(&s, &a).unwrap();
    let back = checkpoint::load(&a).unwrap();
    assert_eq!(back, s);
    checkpoint::save(&back, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = checkpoint::encode(&trained_like_state());
    assert!(matches!(
        checkpoint::decode(&bytes[..bytes.len() - 3]),
        Err(Error::Checkpoint(m)) if m.contains("truncated")
    ));
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(checkpoint::decode(&longer), Err(Error::Checkpoint(m)) if m.contains("trailing")));

    let text = String::from_utf8_lossy(&bytes).into_owned();
    let v2 = text.replacen("difftt-checkpoint 1", "difftt-checkpoint 2", 1);
    assert!(matches!(
        checkpoint::decode(v2.as_bytes()),
        Err(Error::VersionMismatch { found, expected: 1 }) if found == "2"
    ));
    assert!(matches!(checkpoint::decode(b"hello"), Err(Error::Checkpoint(_))));

    let head_end = bytes.windows(5).position(|w| w == b"\nend\n").unwrap();
    let head = std::str::from_utf8(&bytes[..head_end]).unwrap();
    let wrong = head.replacen("user_rep.gate.weight 6x1", "user_rep.gate.weight 1x6", 1);
    assert_ne!(wrong, head, "manifest line for the gate weight not found:\n{head}");
    let mut bad = wrong.into_bytes();
    bad.extend_from_slice(&bytes[head_end..]);
    assert!(matches!(checkpoint::decode(&bad), Err(Error::Checkpoint(m)) if m.contains("does not match")));
}

#[test]
fn config_files_and_overrides_resolve() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "# desk run\nseed = 11\ndim = 8  # narrow\nlr = 0.01\n").unwrap();
    let mut cfg = RunConfig::from_file(&path).unwrap();
    cfg.apply_overrides(&["inner_steps=3".into()]).unwrap();
    assert_eq!((cfg.synth.seed, cfg.train.seed, cfg.dim), (11, 11, 8));
    assert_eq!(cfg.ttt().steps, 3);
    let resolved = cfg.resolved();
    assert!(resolved.contains("ttt_steps = 3\n") && resolved.contains("lr = 0.01\n"));
    assert_eq!(resolved.lines().count(), difftt::config::KEYS.len());

    std::fs::write(&path, "seed = 1\nlearning_rate = 2\n").unwrap();
    let e = RunConfig::from_file(&path).unwrap_err();
    assert_eq!(e.kind(), "config");
    assert!(e.to_string().contains(":2: unknown key `learning_rate`"), "{e}");
}
