use std::path::{Path, PathBuf};
use std::process::Command;

use disthash::cli::scenario::{parse, EventDecl, EventKind, NodeDecl, Scenario, ScenarioConfig, ScenarioError};
use disthash::cli::{main_with, Args, EXIT_OK, EXIT_SCENARIO, EXIT_VIOLATION};
use disthash::dataops::SearchMode;
use disthash::types::{LocalityDescriptor, PatternKey, Role};
use proptest::prelude::*;

const MINIMAL: &str = "\
[config]
[nodes]
l0 lus net0 as0 fr eu
r0 ragent net0 as0 fr eu
a1 agent net0 as0 fr eu
a2 agent net0 as0 fr eu
";

fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("disthash-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn args(scenario: PathBuf) -> Args {
    Args {
        scenario,
        seed: None,
        trace: None,
        metrics: None,
        check: false,
    }
}

/// Exit status, stdout and stderr of one in-process run.
fn run(a: &Args) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with(a, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn run_text(name: &str, text: &str) -> (i32, String, String) {
    let p = scratch(name);
    std::fs::write(&p, text).unwrap();
    run(&args(p))
}

fn field<'a>(record: &'a str, key: &str) -> Option<&'a str> {
    record
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
}

fn validation_field(text: &str) -> String {
    match parse(text) {
        Err(ScenarioError::Validation { field, .. }) => field,
        other => panic!("expected a validation error, got {other:?}"),
    }
}

// ---- parsing ----

#[test]
fn minimal_file_parses() {
    let s = parse(MINIMAL).unwrap();
    assert_eq!(s.nodes.len(), 4);
    assert!(s.events.is_empty());
    assert_eq!(s.config, ScenarioConfig::default());
    assert_eq!(s.nodes[1].role, Role::RAgent);
}

#[test]
fn shipped_scenarios_parse() {
    for f in ["happy.scn", "failures.scn"] {
        let text = std::fs::read_to_string(scenario_dir().join(f)).unwrap();
        parse(&text).unwrap_or_else(|e| panic!("{f}: {e}"));
    }
}

#[test]
fn undeclared_node_is_rejected() {
    let text = format!("{MINIMAL}[events]\n10 search via=a9 pattern=x\n");
    assert_eq!(validation_field(&text), "events[0].via");
}

#[test]
fn thresholds_out_of_order_are_rejected() {
    for (min, max) in [(5, 5), (9, 4), (0, 4)] {
        let text = MINIMAL.replace("[config]\n", &format!("[config]\nmin_cluster = {min}\nmax_cluster = {max}\n"));
        assert_eq!(validation_field(&text), "config.min_cluster", "{min}/{max}");
    }
}

#[test]
fn timeout_shorter_than_two_periods_is_rejected() {
    let text = MINIMAL.replace("[config]\n", "[config]\nheartbeat_ms = 50\ntimeout_ms = 99\n");
    assert_eq!(validation_field(&text), "config.timeout_ms");
    let ok = MINIMAL.replace("[config]\n", "[config]\nheartbeat_ms = 50\ntimeout_ms = 100\n");
    assert!(parse(&ok).is_ok());
}

#[test]
fn decreasing_event_times_are_rejected() {
    let text = format!(
        "{MINIMAL}[events]\n20 insert o1 via=a1 type=T payload=x\n10 search via=a1 exact=T\n"
    );
    assert_eq!(validation_field(&text), "events[1].time");
}

#[test]
fn event_semantics_are_validated() {
    let cases = [
        ("10 update o1 via=a1 payload=y", "events[0].label"),
        ("10 crash a1", "events[0].kind"),
        ("10 join r0", "events[0].node"),
        ("10 search via=l0 exact=T", "events[0].via"),
    ];
    for (ev, want) in cases {
        let text = format!("{MINIMAL}[events]\n{ev}\n");
        assert_eq!(validation_field(&text), want, "{ev}");
    }
    let hb = MINIMAL.replace("[config]\n", "[config]\nheartbeat_ms = 50\ntimeout_ms = 150\n");
    assert_eq!(
        validation_field(&format!("{hb}[events]\n10 rejoin a1\n")),
        "events[0].node"
    );
    let dup = format!(
        "{MINIMAL}[events]\n10 insert o1 via=a1 type=T payload=x\n20 insert o2 via=a2 type=T payload=x\n"
    );
    assert_eq!(validation_field(&dup), "events[1].label");
    let lost = MINIMAL.replace("[config]\n", "[config]\nexpect_lost = o7\n");
    assert_eq!(validation_field(&lost), "config.expect_lost");
}

#[test]
fn clients_must_be_named_once_declared() {
    let text = format!("{MINIMAL}c0 client net0 as0 fr eu\n[events]\n10 search via=a1 exact=T\n");
    assert_eq!(validation_field(&text), "events[0].client");
    let named = format!("{MINIMAL}c0 client net0 as0 fr eu\n[events]\n10 search via=a1 exact=T client=c0\n");
    assert!(parse(&named).is_ok());
}

#[test]
fn syntax_errors_carry_the_line() {
    let cases = [
        ("[config]\nseed = x\n", 2),
        ("[config]\nseed = 1\nseed = 2\n", 3),
        ("[nodes]\nr0 ragent net0\n", 2),
        ("stray\n", 1),
        ("[config]\n\n# c\n[bogus]\n", 4),
        ("[nodes]\nr0 ragent net0 as0 fr eu\n[events]\n10 teleport r0\n", 4),
        ("[nodes]\nr0 ragent net0 as0 fr eu\n[events]\n10 search via=r0 exact=A pattern=b\n", 4),
    ];
    for (text, want) in cases {
        match parse(text) {
            Err(ScenarioError::Syntax { line, .. }) => assert_eq!(line, want, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
}

// ---- round trip ----

const TOKENS: [&str; 3] = ["n0", "n1", "n2"];

fn locality(i: usize) -> LocalityDescriptor {
    let t = TOKENS[i % 3];
    LocalityDescriptor::new(t, format!("as{i}"), "fr", "eu").unwrap()
}

/// A scenario valid by construction: each draw picks the next event among
/// those legal in the state built so far.
fn build(cfg: ScenarioConfig, shape: (usize, usize, usize), draws: &[(u8, u8, u16)], lost: &[bool]) -> Scenario {
    let (r, a, c) = shape;
    let mut nodes = Vec::new();
    for i in 0..r {
        nodes.push(NodeDecl {
            name: format!("r{i}"),
            role: Role::RAgent,
            locality: locality(i),
        });
    }
    for i in 0..a {
        nodes.push(NodeDecl {
            name: format!("a{i}"),
            role: Role::Agent,
            locality: locality(i),
        });
    }
    for i in 0..c {
        nodes.push(NodeDecl {
            name: format!("c{i}"),
            role: Role::Client,
            locality: locality(i),
        });
    }
    let peers: Vec<String> = nodes.iter().filter(|n| n.role != Role::Client).map(|n| n.name.clone()).collect();
    let client = |x: u8| (c > 0).then(|| format!("c{}", x as usize % c));
    let mut labels: Vec<String> = Vec::new();
    let mut crashed: Vec<String> = Vec::new();
    let mut joined: Vec<String> = Vec::new();
    let mut events = Vec::new();
    let mut t = 0u64;
    for (n, &(k, x, dt)) in draws.iter().enumerate() {
        t += u64::from(dt);
        let via = peers[x as usize % peers.len()].clone();
        let hb = cfg.heartbeat_ms > 0;
        let kind = match k % 9 {
            0 => {
                labels.push(format!("o{n}"));
                EventKind::Insert {
                    label: format!("o{n}"),
                    via,
                    type_tag: ["Doc", "Log"][x as usize % 2].to_string(),
                    keys: (0..x % 3).map(|i| format!("k{i}")).collect(),
                    payload: format!("p{n}"),
                    client: client(x),
                }
            }
            1 | 2 => EventKind::Search {
                via,
                criterion: if k % 2 == 0 {
                    PatternKey::exact("Doc")
                } else {
                    PatternKey::pattern(format!("k{}", x % 3))
                },
                mode: if x % 2 == 0 { SearchMode::All } else { SearchMode::First },
                client: client(x),
            },
            3 if !labels.is_empty() => EventKind::Update {
                label: labels[x as usize % labels.len()].clone(),
                via,
                payload: format!("u{n}"),
                client: client(x),
            },
            4 if !labels.is_empty() => EventKind::Read {
                label: labels[x as usize % labels.len()].clone(),
                client: client(x),
            },
            5 if hb && !crashed.contains(&via) => {
                crashed.push(via.clone());
                EventKind::Crash { node: via }
            }
            6 if hb && !crashed.is_empty() => EventKind::Rejoin {
                node: crashed.remove(x as usize % crashed.len()),
            },
            7 if hb && !labels.is_empty() => EventKind::CrashHolders {
                label: labels[x as usize % labels.len()].clone(),
                gap_ms: u64::from(dt),
            },
            8 if a > 0 && !joined.contains(&format!("a{}", x as usize % a)) => {
                let node = format!("a{}", x as usize % a);
                joined.push(node.clone());
                EventKind::Join { node }
            }
            _ => EventKind::Search {
                via,
                criterion: PatternKey::pattern("k0"),
                mode: SearchMode::All,
                client: client(x),
            },
        };
        events.push(EventDecl { time_ms: t, kind });
    }
    let mut config = cfg;
    config.expect_lost = labels.iter().zip(lost).filter(|(_, l)| **l).map(|(s, _)| s.clone()).collect();
    Scenario { config, nodes, events }
}

fn config_strategy() -> impl Strategy<Value = ScenarioConfig> {
    (
        (any::<u64>(), 1usize..10, 1usize..100, prop_oneof![Just(0u64), 10u64..100], 2u64..5),
        (0u64..20, 0u64..20, 0u64..5, 0usize..4, 0usize..40),
        (1u32..10, 1usize..4, 1u64..500, proptest::option::of(0u64..5_000)),
    )
        .prop_map(|((seed, min, span, hb, k), (base, tier, jitter, f, floor), (mig, lus, boot, drain))| {
            ScenarioConfig {
                seed,
                min_cluster: min,
                max_cluster: min + span,
                heartbeat_ms: hb,
                timeout_ms: hb * k,
                latency_base_ms: base,
                latency_tier_ms: tier,
                latency_jitter_ms: jitter,
                delegation_factor: [1.0, 1.5, 2.0, 3.25][f],
                delegation_floor: floor,
                migration_threshold: mig,
                lus_count: lus,
                bootstrap_ms: boot,
                drain_ms: drain,
                expect_lost: Vec::new(),
            }
        })
}

proptest! {
    #[test]
    fn print_then_parse_round_trips(
        cfg in config_strategy(),
        shape in (1usize..4, 0usize..6, 0usize..3),
        draws in proptest::collection::vec((any::<u8>(), any::<u8>(), 0u16..300), 0..40),
        lost in proptest::collection::vec(any::<bool>(), 0..40),
    ) {
        let s = build(cfg, shape, &draws, &lost);
        let text = s.to_string();
        let back = parse(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(back.to_string(), text);
    }
}

// ---- running ----

#[test]
fn happy_path_exits_zero() {
    let (code, out, err) = run(&args(scenario_dir().join("happy.scn")));
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(err.is_empty(), "{err}");
    let census = out.lines().find(|l| l.starts_with("census ")).unwrap();
    assert_eq!(field(census, "violations"), Some("0"));
    assert_eq!(field(census, "lost"), Some("0"));
}

#[test]
fn expected_loss_exits_zero_with_a_loss_record() {
    let (code, out, err) = run(&args(scenario_dir().join("failures.scn")));
    assert_eq!(code, EXIT_OK, "{err}");
    let lost: Vec<&str> = out.lines().filter(|l| l.starts_with("lost ")).collect();
    assert_eq!(lost.len(), 1);
    assert_eq!(field(lost[0], "label"), Some("o4"));
    let census = out.lines().find(|l| l.starts_with("census ")).unwrap();
    assert_eq!(field(census, "unexpected_lost"), Some("0"));
}

#[test]
fn unexpected_loss_exits_one_with_a_named_diagnostic() {
    let text = std::fs::read_to_string(scenario_dir().join("failures.scn")).unwrap();
    let text: String = text
        .lines()
        .filter(|l| !l.starts_with("expect_lost"))
        .map(|l| format!("{l}\n"))
        .collect();
    let (code, _, err) = run_text("unexpected.scn", &text);
    assert_eq!(code, EXIT_VIOLATION);
    assert!(err.lines().any(|l| l.starts_with("violation ")), "{err}");
}

#[test]
fn unreadable_or_invalid_scenarios_exit_two() {
    let (code, _, err) = run(&args(scratch("does-not-exist.scn")));
    assert_eq!(code, EXIT_SCENARIO);
    assert!(err.starts_with("error: "));
    let bad = MINIMAL.replace("[config]\n", "[config]\nmin_cluster = 9\nmax_cluster = 3\n");
    let (code, _, err) = run_text("bad.scn", &bad);
    assert_eq!(code, EXIT_SCENARIO);
    assert!(err.contains("config.min_cluster"), "{err}");
}

#[test]
fn check_validates_without_running() {
    let mut a = args(scenario_dir().join("happy.scn"));
    a.check = true;
    let (code, out, _) = run(&a);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out, "scenario ok nodes=8 events=8\n");
    let p = scratch("bad-check.scn");
    std::fs::write(&p, "[nodes]\n").unwrap();
    let mut a = args(p);
    a.check = true;
    assert_eq!(run(&a).0, EXIT_SCENARIO);
}

#[test]
fn zero_event_run_emits_header_and_census_only() {
    let (code, out, err) = run_text("empty.scn", MINIMAL);
    assert_eq!(code, EXIT_OK, "{err}");
    let first = out.lines().next().unwrap();
    assert!(first.starts_with("run seed="), "{first}");
    for l in out.lines().skip(1) {
        let kind = l.split_whitespace().next().unwrap();
        assert!(
            ["member", "cluster", "census", "messages"].contains(&kind),
            "unexpected record {l}"
        );
    }
    let census = out.lines().find(|l| l.starts_with("census ")).unwrap();
    assert_eq!(field(census, "agents"), Some("2"));
    assert_eq!(field(census, "objects"), Some("0"));
}

#[test]
fn one_op_record_per_completed_operation() {
    let (code, out, _) = run(&args(scenario_dir().join("happy.scn")));
    assert_eq!(code, EXIT_OK);
    let ops: Vec<&str> = out.lines().filter(|l| l.starts_with("op ")).collect();
    // every event of happy.scn is a client operation and every one completes
    assert_eq!(ops.len(), 8);
    let reqs: std::collections::BTreeSet<&str> = ops.iter().filter_map(|l| field(l, "req")).collect();
    assert_eq!(reqs.len(), ops.len());
    for l in &ops {
        for k in ["messages", "peer_messages", "hops", "outcome", "completed_us"] {
            assert!(field(l, k).is_some(), "{k} missing in {l}");
        }
        if field(l, "kind").unwrap().starts_with("search") {
            for k in ["steps", "bound", "decomposed", "clusters", "results"] {
                assert!(field(l, k).is_some(), "{k} missing in {l}");
            }
        }
    }
}

#[test]
fn same_scenario_and_seed_give_identical_bytes() {
    for f in ["happy.scn", "failures.scn"] {
        let mut outs = Vec::new();
        for i in 0..2 {
            let mut a = args(scenario_dir().join(f));
            a.metrics = Some(scratch(&format!("{f}.{i}.metrics")));
            a.trace = Some(scratch(&format!("{f}.{i}.trace")));
            let (code, out, _) = run(&a);
            assert_eq!(code, EXIT_OK);
            assert!(out.is_empty(), "metrics went to a file");
            outs.push((
                std::fs::read(a.metrics.unwrap()).unwrap(),
                std::fs::read(a.trace.unwrap()).unwrap(),
            ));
        }
        assert!(!outs[0].1.is_empty());
        assert_eq!(outs[0], outs[1], "{f}");
    }
}

#[test]
fn seed_flag_overrides_the_file() {
    let mut a = args(scenario_dir().join("happy.scn"));
    a.seed = Some(99);
    let (code, out, _) = run(&a);
    assert_eq!(code, EXIT_OK);
    assert!(out.starts_with("run seed=99 "), "{out}");
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_disthash");
    let ok = Command::new(bin)
        .arg("--scenario")
        .arg(scenario_dir().join("happy.scn"))
        .arg("--check")
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(EXIT_OK));
    let missing = Command::new(bin).arg("--scenario").arg(scratch("nope.scn")).output().unwrap();
    assert_eq!(missing.status.code(), Some(EXIT_SCENARIO));
}
