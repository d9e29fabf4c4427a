//! Scenario files.
//!
//! ```text
//! [config]
//! seed = 7
//! heartbeat_ms = 50
//! timeout_ms = 200
//!
//! [nodes]
//! # name role network as country continent
//! r0 ragent net0 as0 fr eu
//! a1 agent  net0 as0 fr eu
//!
//! [events]
//! # time_ms kind args
//! 10 insert o1 via=a1 type=Sensor keys=hot,cold payload=v0
//! 20 search via=a1 pattern=hot
//! 30 crash a1
//! ```
//!
//! Blank lines and `#` comments are ignored. Values never contain spaces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use crate::dataops::SearchMode;
use crate::membership::{HeartbeatConfig, Thresholds};
use crate::sim::{LatencyModel, SimConfig, MS};
use crate::types::{DistObject, LocalityDescriptor, PatternKey, Role};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{field}: {reason}")]
    Validation { field: String, reason: String },
}

fn syntax(line: usize, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Syntax {
        line,
        message: message.into(),
    }
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub min_cluster: usize,
    pub max_cluster: usize,
    pub heartbeat_ms: u64,
    pub timeout_ms: u64,
    pub latency_base_ms: u64,
    pub latency_tier_ms: u64,
    pub latency_jitter_ms: u64,
    pub delegation_factor: f64,
    pub delegation_floor: usize,
    pub migration_threshold: u32,
    pub lus_count: usize,
    pub bootstrap_ms: u64,
    pub drain_ms: Option<u64>,
    /// Labels of objects whose loss the scenario expects.
    pub expect_lost: Vec<String>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            seed: d.seed,
            min_cluster: d.thresholds.min_cluster,
            max_cluster: d.thresholds.max_cluster,
            heartbeat_ms: 0,
            timeout_ms: 0,
            latency_base_ms: d.latency.base / MS,
            latency_tier_ms: d.latency.per_tier / MS,
            latency_jitter_ms: d.latency.jitter / MS,
            delegation_factor: d.delegation_factor,
            delegation_floor: d.delegation_floor,
            migration_threshold: d.migration_threshold,
            lus_count: d.lus_count,
            bootstrap_ms: d.bootstrap / MS,
            drain_ms: None,
            expect_lost: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn to_sim_config(&self) -> SimConfig {
        SimConfig {
            seed: self.seed,
            thresholds: Thresholds {
                min_cluster: self.min_cluster,
                max_cluster: self.max_cluster,
            },
            heartbeat: HeartbeatConfig {
                period: self.heartbeat_ms * MS,
                failure_timeout: self.timeout_ms * MS,
            },
            latency: LatencyModel {
                base: self.latency_base_ms * MS,
                per_tier: self.latency_tier_ms * MS,
                jitter: self.latency_jitter_ms * MS,
            },
            delegation_factor: self.delegation_factor,
            delegation_floor: self.delegation_floor,
            migration_threshold: self.migration_threshold,
            lus_count: self.lus_count,
            bootstrap: self.bootstrap_ms * MS,
            drain: self.drain_ms.map(|d| d * MS),
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeDecl {
    pub name: String,
    pub role: Role,
    pub locality: LocalityDescriptor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Insert {
        label: String,
        via: String,
        type_tag: String,
        keys: Vec<String>,
        payload: String,
        client: Option<String>,
    },
    Search {
        via: String,
        criterion: PatternKey,
        mode: SearchMode,
        client: Option<String>,
    },
    Update {
        label: String,
        via: String,
        payload: String,
        client: Option<String>,
    },
    Read {
        label: String,
        client: Option<String>,
    },
    Crash {
        node: String,
    },
    CrashHolders {
        label: String,
        gap_ms: u64,
    },
    Rejoin {
        node: String,
    },
    Join {
        node: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventDecl {
    pub time_ms: u64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub nodes: Vec<NodeDecl>,
    pub events: Vec<EventDecl>,
}

impl Scenario {
    /// Object created by the insert event labelled `label`.
    pub fn object(&self, label: &str) -> Option<DistObject> {
        self.events.iter().find_map(|e| match &e.kind {
            EventKind::Insert {
                label: l,
                type_tag,
                keys,
                payload,
                ..
            } if l == label => Some(DistObject::new(
                type_tag.clone(),
                keys.iter().cloned(),
                payload.as_bytes().to_vec(),
            )),
            _ => None,
        })
    }
}

// ---- parsing ----

#[derive(PartialEq)]
enum Section {
    None,
    Config,
    Nodes,
    Events,
}

fn num<T: std::str::FromStr>(line: usize, what: &str, v: &str) -> Result<T, ScenarioError> {
    v.parse()
        .map_err(|_| syntax(line, format!("`{v}` is not a valid {what}")))
}

/// Parses and validates a scenario.
pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
    let mut s = Scenario::default();
    let mut section = Section::None;
    let mut seen_keys = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if body.starts_with('[') {
            section = match body {
                "[config]" => Section::Config,
                "[nodes]" => Section::Nodes,
                "[events]" => Section::Events,
                other => return Err(syntax(line, format!("unknown section {other}"))),
            };
            continue;
        }
        match section {
            Section::None => return Err(syntax(line, "content before the first section")),
            Section::Config => {
                let Some((k, v)) = body.split_once('=') else {
                    return Err(syntax(line, "expected `key = value`"));
                };
                let (k, v) = (k.trim(), v.trim());
                if !seen_keys.insert(k.to_string()) {
                    return Err(syntax(line, format!("`{k}` set twice")));
                }
                config_entry(&mut s.config, line, k, v)?;
            }
            Section::Nodes => s.nodes.push(node_line(line, body)?),
            Section::Events => s.events.push(event_line(line, body)?),
        }
    }
    validate(&s)?;
    Ok(s)
}

fn config_entry(c: &mut ScenarioConfig, line: usize, k: &str, v: &str) -> Result<(), ScenarioError> {
    match k {
        "seed" => c.seed = num(line, "seed", v)?,
        "min_cluster" => c.min_cluster = num(line, "size", v)?,
        "max_cluster" => c.max_cluster = num(line, "size", v)?,
        "heartbeat_ms" => c.heartbeat_ms = num(line, "duration", v)?,
        "timeout_ms" => c.timeout_ms = num(line, "duration", v)?,
        "latency_base_ms" => c.latency_base_ms = num(line, "duration", v)?,
        "latency_tier_ms" => c.latency_tier_ms = num(line, "duration", v)?,
        "latency_jitter_ms" => c.latency_jitter_ms = num(line, "duration", v)?,
        "delegation_factor" => c.delegation_factor = num(line, "factor", v)?,
        "delegation_floor" => c.delegation_floor = num(line, "count", v)?,
        "migration_threshold" => c.migration_threshold = num(line, "count", v)?,
        "lus_count" => c.lus_count = num(line, "count", v)?,
        "bootstrap_ms" => c.bootstrap_ms = num(line, "duration", v)?,
        "drain_ms" => c.drain_ms = Some(num(line, "duration", v)?),
        "expect_lost" => {
            c.expect_lost = v
                .split(',')
                .map(str::trim)
                .filter(|x| !x.is_empty())
                .map(String::from)
                .collect()
        }
        other => return Err(syntax(line, format!("unknown config key `{other}`"))),
    }
    Ok(())
}

fn node_line(line: usize, body: &str) -> Result<NodeDecl, ScenarioError> {
    let f: Vec<&str> = body.split_whitespace().collect();
    let [name, role, net, asd, country, continent] = f.as_slice() else {
        return Err(syntax(line, "expected `name role network as country continent`"));
    };
    let role = match *role {
        "ragent" => Role::RAgent,
        "agent" => Role::Agent,
        "client" => Role::Client,
        "lus" => Role::Lus,
        other => return Err(syntax(line, format!("unknown role `{other}`"))),
    };
    let locality = LocalityDescriptor::new(*net, *asd, *country, *continent).map_err(|e| syntax(line, e.to_string()))?;
    Ok(NodeDecl {
        name: name.to_string(),
        role,
        locality,
    })
}

fn event_line(line: usize, body: &str) -> Result<EventDecl, ScenarioError> {
    let mut f = body.split_whitespace();
    let time_ms = num(line, "time", f.next().expect("non-empty line"))?;
    let Some(kind) = f.next() else {
        return Err(syntax(line, "missing event kind"));
    };
    let mut positional = Vec::new();
    let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
    for tok in f {
        match tok.split_once('=') {
            Some((k, v)) => {
                if kv.insert(k, v).is_some() {
                    return Err(syntax(line, format!("`{k}` given twice")));
                }
            }
            None => positional.push(tok),
        }
    }
    let mut take = |k: &str| kv.remove(k).map(String::from);
    let one = |positional: &[&str]| -> Result<String, ScenarioError> {
        match positional {
            [x] => Ok(x.to_string()),
            _ => Err(syntax(line, format!("`{kind}` takes exactly one name"))),
        }
    };
    let need = |v: Option<String>, k: &str| v.ok_or_else(|| syntax(line, format!("`{kind}` needs {k}=")));
    let ev = match kind {
        "insert" => EventKind::Insert {
            label: one(&positional)?,
            via: need(take("via"), "via")?,
            type_tag: need(take("type"), "type")?,
            keys: take("keys")
                .map(|k| k.split(',').filter(|x| !x.is_empty()).map(String::from).collect())
                .unwrap_or_default(),
            payload: need(take("payload"), "payload")?,
            client: take("client"),
        },
        "search" | "search_first" => {
            let criterion = match (take("exact"), take("pattern")) {
                (Some(e), None) => PatternKey::exact(e),
                (None, Some(p)) => PatternKey::pattern(p),
                _ => return Err(syntax(line, "search needs exactly one of exact= or pattern=")),
            };
            if !positional.is_empty() {
                return Err(syntax(line, "search takes no positional arguments"));
            }
            EventKind::Search {
                via: need(take("via"), "via")?,
                criterion,
                mode: if kind == "search" {
                    SearchMode::All
                } else {
                    SearchMode::First
                },
                client: take("client"),
            }
        }
        "update" => EventKind::Update {
            label: one(&positional)?,
            via: need(take("via"), "via")?,
            payload: need(take("payload"), "payload")?,
            client: take("client"),
        },
        "read" => EventKind::Read {
            label: one(&positional)?,
            client: take("client"),
        },
        "crash" => EventKind::Crash {
            node: one(&positional)?,
        },
        "crash_holders" => EventKind::CrashHolders {
            label: one(&positional)?,
            gap_ms: num(line, "duration", &need(take("gap_ms"), "gap_ms")?)?,
        },
        "rejoin" => EventKind::Rejoin {
            node: one(&positional)?,
        },
        "join" => EventKind::Join {
            node: one(&positional)?,
        },
        other => return Err(syntax(line, format!("unknown event kind `{other}`"))),
    };
    if let Some(k) = kv.keys().next() {
        return Err(syntax(line, format!("unexpected argument `{k}=`")));
    }
    Ok(EventDecl { time_ms, kind: ev })
}

// ---- validation ----

fn validate(s: &Scenario) -> Result<(), ScenarioError> {
    let c = &s.config;
    Thresholds::new(c.min_cluster, c.max_cluster)
        .map_err(|e| invalid("config.min_cluster", e.to_string()))?;
    if c.heartbeat_ms > 0 && c.timeout_ms < 2 * c.heartbeat_ms {
        return Err(invalid("config.timeout_ms", "must be at least twice heartbeat_ms"));
    }
    if !(c.delegation_factor.is_finite() && c.delegation_factor >= 1.0) {
        return Err(invalid("config.delegation_factor", "must be a finite number ≥ 1"));
    }
    if c.bootstrap_ms == 0 {
        return Err(invalid("config.bootstrap_ms", "must be positive"));
    }

    let mut roles: BTreeMap<&str, Role> = BTreeMap::new();
    for n in &s.nodes {
        if roles.insert(&n.name, n.role).is_some() {
            return Err(invalid(format!("nodes.{}", n.name), "declared twice"));
        }
    }
    if !roles.values().any(|r| *r == Role::RAgent) {
        return Err(invalid("nodes", "at least one ragent is required"));
    }
    let has_client = roles.values().any(|r| *r == Role::Client);

    let peer = |field: String, name: &str| -> Result<(), ScenarioError> {
        match roles.get(name) {
            Some(Role::Agent | Role::RAgent) => Ok(()),
            Some(_) => Err(invalid(field, format!("`{name}` is not an agent or ragent"))),
            None => Err(invalid(field, format!("undeclared node `{name}`"))),
        }
    };
    let client = |field: String, name: &Option<String>| -> Result<(), ScenarioError> {
        match name.as_deref() {
            None if has_client => Err(invalid(field, "client= is required when clients are declared")),
            None => Ok(()),
            Some(n) => match roles.get(n) {
                Some(Role::Client) => Ok(()),
                Some(_) => Err(invalid(field, format!("`{n}` is not a client"))),
                None => Err(invalid(field, format!("undeclared node `{n}`"))),
            },
        }
    };

    let mut labels: BTreeMap<&str, DistObject> = BTreeMap::new();
    let mut crashed: BTreeSet<&str> = BTreeSet::new();
    let mut joins: BTreeSet<&str> = BTreeSet::new();
    let mut last = 0;
    for (i, e) in s.events.iter().enumerate() {
        let f = |k: &str| format!("events[{i}].{k}");
        if e.time_ms < last {
            return Err(invalid(f("time"), "event times must not decrease"));
        }
        last = e.time_ms;
        let needs_heartbeat = matches!(
            e.kind,
            EventKind::Crash { .. } | EventKind::CrashHolders { .. } | EventKind::Rejoin { .. }
        );
        if needs_heartbeat && c.heartbeat_ms == 0 {
            return Err(invalid(f("kind"), "crash events need heartbeat_ms > 0"));
        }
        match &e.kind {
            EventKind::Insert {
                label,
                via,
                type_tag,
                keys,
                payload,
                client: cl,
            } => {
                peer(f("via"), via)?;
                client(f("client"), cl)?;
                if type_tag.is_empty() {
                    return Err(invalid(f("type"), "must be non-empty"));
                }
                let obj = DistObject::new(type_tag.clone(), keys.iter().cloned(), payload.as_bytes().to_vec());
                if labels.contains_key(label.as_str()) {
                    return Err(invalid(f("label"), format!("`{label}` defined twice")));
                }
                if let Some((other, _)) = labels.iter().find(|(_, o)| o.id == obj.id) {
                    return Err(invalid(f("label"), format!("same content as `{other}`")));
                }
                labels.insert(label, obj);
            }
            EventKind::Search { via, client: cl, .. } => {
                peer(f("via"), via)?;
                client(f("client"), cl)?;
            }
            EventKind::Update {
                label,
                via,
                client: cl,
                ..
            } => {
                peer(f("via"), via)?;
                client(f("client"), cl)?;
                if !labels.contains_key(label.as_str()) {
                    return Err(invalid(f("label"), format!("`{label}` used before its insert")));
                }
            }
            EventKind::Read { label, client: cl } => {
                client(f("client"), cl)?;
                if !labels.contains_key(label.as_str()) {
                    return Err(invalid(f("label"), format!("`{label}` used before its insert")));
                }
            }
            EventKind::Crash { node } => {
                peer(f("node"), node)?;
                crashed.insert(node);
            }
            EventKind::CrashHolders { label, .. } => {
                if !labels.contains_key(label.as_str()) {
                    return Err(invalid(f("label"), format!("`{label}` used before its insert")));
                }
            }
            EventKind::Rejoin { node } => {
                peer(f("node"), node)?;
                if !crashed.remove(node.as_str()) {
                    return Err(invalid(f("node"), format!("`{node}` is not crashed")));
                }
            }
            EventKind::Join { node } => {
                if roles.get(node.as_str()) != Some(&Role::Agent) {
                    return Err(invalid(f("node"), format!("`{node}` is not a declared agent")));
                }
                if !joins.insert(node) {
                    return Err(invalid(f("node"), format!("`{node}` joins twice")));
                }
            }
        }
    }
    for l in &c.expect_lost {
        if !labels.contains_key(l.as_str()) {
            return Err(invalid("config.expect_lost", format!("unknown label `{l}`")));
        }
    }
    Ok(())
}

// ---- printing ----

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(f, "[config]")?;
        writeln!(f, "seed = {}", c.seed)?;
        writeln!(f, "min_cluster = {}", c.min_cluster)?;
        writeln!(f, "max_cluster = {}", c.max_cluster)?;
        writeln!(f, "heartbeat_ms = {}", c.heartbeat_ms)?;
        writeln!(f, "timeout_ms = {}", c.timeout_ms)?;
        writeln!(f, "latency_base_ms = {}", c.latency_base_ms)?;
        writeln!(f, "latency_tier_ms = {}", c.latency_tier_ms)?;
        writeln!(f, "latency_jitter_ms = {}", c.latency_jitter_ms)?;
        writeln!(f, "delegation_factor = {:?}", c.delegation_factor)?;
        writeln!(f, "delegation_floor = {}", c.delegation_floor)?;
        writeln!(f, "migration_threshold = {}", c.migration_threshold)?;
        writeln!(f, "lus_count = {}", c.lus_count)?;
        writeln!(f, "bootstrap_ms = {}", c.bootstrap_ms)?;
        if let Some(d) = c.drain_ms {
            writeln!(f, "drain_ms = {d}")?;
        }
        if !c.expect_lost.is_empty() {
            writeln!(f, "expect_lost = {}", c.expect_lost.join(","))?;
        }
        writeln!(f, "\n[nodes]")?;
        for n in &self.nodes {
            let l = &n.locality;
            writeln!(
                f,
                "{} {} {} {} {} {}",
                n.name,
                n.role.as_str(),
                l.network_domain,
                l.as_domain,
                l.country,
                l.continent
            )?;
        }
        writeln!(f, "\n[events]")?;
        for e in &self.events {
            writeln!(f, "{} {}", e.time_ms, event_str(&e.kind))?;
        }
        Ok(())
    }
}

fn event_str(k: &EventKind) -> String {
    let client = |c: &Option<String>| c.as_ref().map(|c| format!(" client={c}")).unwrap_or_default();
    match k {
        EventKind::Insert {
            label,
            via,
            type_tag,
            keys,
            payload,
            client: c,
        } => format!(
            "insert {label} via={via} type={type_tag} keys={} payload={payload}{}",
            keys.join(","),
            client(c)
        ),
        EventKind::Search {
            via,
            criterion,
            mode,
            client: c,
        } => {
            let mut s = String::new();
            let kind = match mode {
                SearchMode::All => "search",
                SearchMode::First => "search_first",
            };
            let _ = write!(s, "{kind} via={via} {}={}{}", criterion.kind.as_str(), criterion.key, client(c));
            s
        }
        EventKind::Update {
            label,
            via,
            payload,
            client: c,
        } => format!("update {label} via={via} payload={payload}{}", client(c)),
        EventKind::Read { label, client: c } => format!("read {label}{}", client(c)),
        EventKind::Crash { node } => format!("crash {node}"),
        EventKind::CrashHolders { label, gap_ms } => format!("crash_holders {label} gap_ms={gap_ms}"),
        EventKind::Rejoin { node } => format!("rejoin {node}"),
        EventKind::Join { node } => format!("join {node}"),
    }
}
