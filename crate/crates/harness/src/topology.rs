//! Brings a scenario's actors up on loopback and keeps them addressable.
//!
//! Address plan for net base `n`: phones on 127.0.1.(n+i), proxies on
//! 127.0.2.(n+i), the B2BUA on 127.0.3.n (internal) and 127.0.4.n
//! (external), the trunk on 127.0.5.n. Distinct bases never collide, so
//! scenarios can run side by side in one process.

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ipts_core::b2bua::{B2buaConfig, B2buaNode, IvrMenu, TrunkProfile};
use ipts_core::clock::Clock;
use ipts_core::ids::derive_seed;
use ipts_core::node::NodeError;
use ipts_core::proxy::{read_cdrs, Cdr, ProxyConfig, ProxyNode};
use ipts_core::registrar::{format_users, Privilege, Subscriber};
use ipts_core::transport::PacketFilter;
use ipts_core::ua::{LadderEntry, Phone, PhoneConfig, PhoneShared, SoftphoneCommand};
use tracing::info;

use crate::scenario::{ActorDecl, ActorKind, Scenario};
use crate::shim::NetShim;
use crate::trunk::{TrunkConfig, TrunkSim};
use crate::HarnessError;

pub const PROXY_PORT: u16 = 5060;
pub const PHONE_PORT: u16 = 5060;
pub const B2BUA_PORT: u16 = 5080;
pub const TRUNK_PORT: u16 = 5060;
pub const REALM: &str = "ipts";

/// How long a restarted node keeps retrying a port its predecessor held.
const REBIND_GRACE: Duration = Duration::from_secs(2);

fn ip(subnet: u8, host: u8) -> IpAddr {
    IpAddr::V4(Ipv4Addr::new(127, 0, subnet, host))
}

/// Loopback addresses for one net base.
#[derive(Debug, Clone, Copy)]
pub struct AddressPlan {
    pub base: u8,
}

impl AddressPlan {
    fn host(&self, subnet: u8, index: usize) -> Result<IpAddr, HarnessError> {
        let last = usize::from(self.base) + index;
        if self.base == 0 || last > 254 {
            return Err(HarnessError::Setup(format!(
                "net base {} leaves no room for host {index}",
                self.base
            )));
        }
        Ok(ip(subnet, last as u8))
    }

    pub fn phone(&self, i: usize) -> Result<IpAddr, HarnessError> {
        self.host(1, i)
    }

    pub fn proxy(&self, i: usize) -> Result<IpAddr, HarnessError> {
        self.host(2, i)
    }

    pub fn b2bua_internal(&self) -> Result<IpAddr, HarnessError> {
        self.host(3, 0)
    }

    pub fn b2bua_external(&self) -> Result<IpAddr, HarnessError> {
        self.host(4, 0)
    }

    pub fn trunk(&self) -> Result<IpAddr, HarnessError> {
        self.host(5, 0)
    }
}

pub struct PhoneActor {
    pub cfg: PhoneConfig,
    pub ext: String,
    pub password: String,
    pub node: Option<Phone>,
    /// Ladder entries of instances that were killed.
    history: Vec<LadderEntry>,
}

impl PhoneActor {
    pub fn shared(&self) -> Option<&Arc<PhoneShared>> {
        self.node.as_ref().map(Phone::shared)
    }

    pub fn ladder(&self) -> Vec<LadderEntry> {
        let mut v = self.history.clone();
        if let Some(p) = &self.node {
            v.extend(p.shared().ladder.snapshot());
        }
        v
    }
}

pub struct TrunkActor {
    pub cfg: TrunkConfig,
    pub node: Option<TrunkSim>,
    history: Vec<LadderEntry>,
}

impl TrunkActor {
    pub fn ladder(&self) -> Vec<LadderEntry> {
        let mut v = self.history.clone();
        if let Some(t) = &self.node {
            v.extend(t.ladder().snapshot());
        }
        v
    }
}

pub enum Actor {
    Proxy {
        cfg: Box<ProxyConfig>,
        node: Option<ProxyNode>,
    },
    B2bua {
        cfg: Box<B2buaConfig>,
        node: Option<B2buaNode>,
    },
    Trunk(TrunkActor),
    Phone(PhoneActor),
}

impl Actor {
    pub fn kind(&self) -> ActorKind {
        match self {
            Actor::Proxy { .. } => ActorKind::Proxy,
            Actor::B2bua { .. } => ActorKind::B2bua,
            Actor::Trunk(_) => ActorKind::Trunk,
            Actor::Phone(_) => ActorKind::Phone,
        }
    }

    pub fn is_running(&self) -> bool {
        match self {
            Actor::Proxy { node, .. } => node.is_some(),
            Actor::B2bua { node, .. } => node.is_some(),
            Actor::Trunk(t) => t.node.is_some(),
            Actor::Phone(p) => p.node.is_some(),
        }
    }
}

pub struct Topology {
    plan: AddressPlan,
    dir: PathBuf,
    _tmp: Option<tempfile::TempDir>,
    shim: Arc<NetShim>,
    clock: Arc<dyn Clock>,
    seed: u64,
    actors: Vec<(String, Actor)>,
    names: Vec<(IpAddr, String)>,
}

fn opt_or<T: std::str::FromStr>(d: &ActorDecl, key: &str, default: T) -> Result<T, HarnessError> {
    Ok(d.opt(key)?.unwrap_or(default))
}

impl Topology {
    /// Builds configurations for every declared actor and starts them all.
    /// State files go to `work_dir`, or a temporary directory.
    pub fn start(
        scenario: &Scenario,
        plan: AddressPlan,
        shim: Arc<NetShim>,
        clock: Arc<dyn Clock>,
        seed: u64,
        work_dir: Option<&Path>,
    ) -> Result<Self, HarnessError> {
        let (dir, tmp) = match work_dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                (d.to_path_buf(), None)
            }
            None => {
                let t = tempfile::tempdir()?;
                (t.path().to_path_buf(), Some(t))
            }
        };
        let mut topo = Self {
            plan,
            dir,
            _tmp: tmp,
            shim,
            clock,
            seed,
            actors: Vec::new(),
            names: Vec::new(),
        };
        topo.write_users(scenario)?;
        topo.configure(scenario)?;
        for i in 0..topo.actors.len() {
            topo.start_index(i)?;
        }
        Ok(topo)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn shim(&self) -> &Arc<NetShim> {
        &self.shim
    }

    pub fn plan(&self) -> AddressPlan {
        self.plan
    }

    pub fn users_path(&self) -> PathBuf {
        self.dir.join("users.csv")
    }

    pub fn cdr_path(&self) -> PathBuf {
        self.dir.join("cdr.csv")
    }

    pub fn vm_dir(&self) -> PathBuf {
        self.dir.join("voicemail")
    }

    pub fn cdrs(&self) -> Result<Vec<Cdr>, HarnessError> {
        read_cdrs(&self.cdr_path()).map_err(|e| HarnessError::Setup(e.to_string()))
    }

    /// Address-to-name pairs for ladder normalization.
    pub fn names(&self) -> &[(IpAddr, String)] {
        &self.names
    }

    pub fn actor(&self, name: &str) -> Option<&Actor> {
        self.actors.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn actors(&self) -> impl Iterator<Item = (&str, &Actor)> {
        self.actors.iter().map(|(n, a)| (n.as_str(), a))
    }

    fn index(&self, name: &str) -> Result<usize, HarnessError> {
        self.actors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| HarnessError::Setup(format!("no actor {name}")))
    }

    /// Every address an actor owns.
    pub fn addresses_of(&self, name: &str) -> Vec<IpAddr> {
        self.names
            .iter()
            .filter(|(_, n)| n == name || n.starts_with(&format!("{name}.")))
            .map(|(ip, _)| *ip)
            .collect()
    }

    fn filter(&self) -> Option<Arc<dyn PacketFilter>> {
        Some(Arc::clone(&self.shim) as Arc<dyn PacketFilter>)
    }

    fn write_users(&self, scenario: &Scenario) -> Result<(), HarnessError> {
        let mut subs: Vec<Subscriber> = Vec::new();
        for d in scenario.of_kind(ActorKind::Phone) {
            let ext = d.ext.clone().unwrap_or_default();
            if subs.iter().any(|s| s.extension == ext) {
                continue;
            }
            let pass = d.options.get("pass").cloned().unwrap_or_else(|| format!("pw{ext}"));
            let privilege = match d.options.get("privilege") {
                Some(p) => {
                    Privilege::parse(p).ok_or_else(|| HarnessError::Setup(format!("{}: bad privilege {p}", d.name)))?
                }
                None => Privilege::Internal,
            };
            subs.push(Subscriber::new(&ext, &d.name, REALM, &pass, privilege));
        }
        ipts_core::registrar::write_atomic(&self.users_path(), format_users(&subs).as_bytes())?;
        Ok(())
    }

    fn configure(&mut self, scenario: &Scenario) -> Result<(), HarnessError> {
        let plan = self.plan;
        let b2bua_decl = scenario.of_kind(ActorKind::B2bua).next();
        let trunk_decl = scenario.of_kind(ActorKind::Trunk).next();
        let b2bua_int = match b2bua_decl {
            Some(_) => Some(SocketAddr::new(plan.b2bua_internal()?, B2BUA_PORT)),
            None => None,
        };
        let trunk_addr = SocketAddr::new(plan.trunk()?, TRUNK_PORT);
        let mut first_proxy = None;
        let (mut n_proxy, mut n_phone) = (0, 0);
        for d in &scenario.actors {
            let actor = match d.kind {
                ActorKind::Proxy => {
                    let addr = SocketAddr::new(plan.proxy(n_proxy)?, PROXY_PORT);
                    n_proxy += 1;
                    first_proxy.get_or_insert(addr);
                    self.names.push((addr.ip(), d.name.clone()));
                    let cfg = ProxyConfig {
                        name: d.name.clone(),
                        bind: addr,
                        tcp: false,
                        realm: REALM.into(),
                        b2bua_addr: b2bua_int,
                        no_answer_ms: opt_or(d, "no_answer_ms", 20_000)?,
                        users_path: Some(self.users_path()),
                        journal_path: Some(self.dir.join("bindings.journal")),
                        cdr_path: Some(self.cdr_path()),
                        ..ProxyConfig::default()
                    };
                    Actor::Proxy {
                        cfg: Box::new(cfg),
                        node: None,
                    }
                }
                ActorKind::B2bua => {
                    let (int, ext) = (plan.b2bua_internal()?, plan.b2bua_external()?);
                    self.names.push((int, format!("{}.int", d.name)));
                    self.names.push((ext, format!("{}.ext", d.name)));
                    let mut ivr = IvrMenu {
                        timeout: Duration::from_millis(opt_or(d, "ivr_timeout_ms", 5000)?),
                        ..IvrMenu::default()
                    };
                    for (k, v) in &d.options {
                        if let Some(digit) = k.strip_prefix("ivr.").and_then(|s| s.chars().next()) {
                            ivr.digit_map.insert(digit, v.clone());
                        }
                    }
                    let trunk = trunk_decl.map(|t| -> Result<TrunkProfile, HarnessError> {
                        Ok(TrunkProfile {
                            provider_addr: trunk_addr,
                            username: opt_or(t, "user", "trunkuser".to_string())?,
                            password: opt_or(t, "pass", "trunkpw".to_string())?,
                            from_domain: "provider.test".into(),
                        })
                    });
                    let cfg = B2buaConfig {
                        name: d.name.clone(),
                        internal_bind: SocketAddr::new(int, B2BUA_PORT),
                        external_bind: SocketAddr::new(ext, B2BUA_PORT),
                        proxy_addr: None,
                        trunk: trunk.transpose()?,
                        vm_dir: self.vm_dir(),
                        conference_max: opt_or(d, "conference_max", 8)?,
                        ivr,
                        ..B2buaConfig::default()
                    };
                    Actor::B2bua {
                        cfg: Box::new(cfg),
                        node: None,
                    }
                }
                ActorKind::Trunk => {
                    self.names.push((trunk_addr.ip(), d.name.clone()));
                    let mut cfg = TrunkConfig::new(trunk_addr);
                    cfg.username = opt_or(d, "user", cfg.username)?;
                    cfg.password = opt_or(d, "pass", cfg.password)?;
                    cfg.challenge = opt_or(d, "challenge", "on".to_string())? != "off";
                    cfg.reject = d.opt("reject")?;
                    cfg.answer_ms = opt_or(d, "answer_ms", cfg.answer_ms)?;
                    cfg.seed = Some(derive_seed(self.seed, &d.name));
                    Actor::Trunk(TrunkActor {
                        cfg,
                        node: None,
                        history: Vec::new(),
                    })
                }
                ActorKind::Phone => {
                    let addr = SocketAddr::new(plan.phone(n_phone)?, PHONE_PORT);
                    n_phone += 1;
                    self.names.push((addr.ip(), d.name.clone()));
                    let ext = d.ext.clone().unwrap_or_default();
                    let mut cfg = PhoneConfig::new(&d.name, addr);
                    cfg.tone_hz = opt_or(d, "tone", 440.0)?;
                    cfg.ring_timeout_s = opt_or(d, "ring_timeout_s", 0)?;
                    cfg.seed = Some(derive_seed(self.seed, &d.name));
                    Actor::Phone(PhoneActor {
                        password: d.options.get("pass").cloned().unwrap_or_else(|| format!("pw{ext}")),
                        ext,
                        cfg,
                        node: None,
                        history: Vec::new(),
                    })
                }
            };
            self.actors.push((d.name.clone(), actor));
        }
        for (_, a) in &mut self.actors {
            if let Actor::B2bua { cfg, .. } = a {
                cfg.proxy_addr = first_proxy;
            }
        }
        Ok(())
    }

    pub fn start_actor(&mut self, name: &str) -> Result<(), HarnessError> {
        let i = self.index(name)?;
        if self.actors[i].1.is_running() {
            return Err(HarnessError::Setup(format!("{name} is already running")));
        }
        self.start_index(i)
    }

    fn start_index(&mut self, i: usize) -> Result<(), HarnessError> {
        let filter = self.filter();
        let clock = Arc::clone(&self.clock);
        let seed = self.seed;
        let (name, actor) = &mut self.actors[i];
        let deadline = Instant::now() + REBIND_GRACE;
        // A killed predecessor's reader threads release the port shortly.
        let retry = |e: &std::io::Error| e.kind() == std::io::ErrorKind::AddrInUse && Instant::now() < deadline;
        loop {
            let res: Result<(), std::io::Error> = match actor {
                Actor::Proxy { cfg, node } => match ProxyNode::start(
                    (**cfg).clone(),
                    Arc::clone(&clock),
                    filter.clone(),
                    Some(derive_seed(seed, name)),
                ) {
                    Ok(n) => {
                        *node = Some(n);
                        Ok(())
                    }
                    Err(NodeError::Io(e)) => Err(e),
                    Err(e) => return Err(HarnessError::Setup(format!("{name}: {e}"))),
                },
                Actor::B2bua { cfg, node } => match B2buaNode::start(
                    (**cfg).clone(),
                    Arc::clone(&clock),
                    filter.clone(),
                    Some(derive_seed(seed, name)),
                ) {
                    Ok(n) => {
                        *node = Some(n);
                        Ok(())
                    }
                    Err(NodeError::Io(e)) => Err(e),
                    Err(e) => return Err(HarnessError::Setup(format!("{name}: {e}"))),
                },
                Actor::Trunk(t) => {
                    TrunkSim::start(t.cfg.clone(), Arc::clone(&clock), filter.clone()).map(|n| t.node = Some(n))
                }
                Actor::Phone(p) => {
                    let mut cfg = p.cfg.clone();
                    cfg.filter = filter.clone();
                    Phone::start(cfg, Arc::clone(&clock)).map(|n| p.node = Some(n))
                }
            };
            match res {
                Ok(()) => {
                    info!(actor = %name, "started");
                    return Ok(());
                }
                Err(e) if retry(&e) => std::thread::sleep(Duration::from_millis(50)),
                Err(e) => return Err(HarnessError::Setup(format!("{name}: {e}"))),
            }
        }
    }

    /// Stops an actor abruptly; its sockets close and in-memory state is lost.
    pub fn kill(&mut self, name: &str) -> Result<(), HarnessError> {
        let i = self.index(name)?;
        let actor = &mut self.actors[i].1;
        if !actor.is_running() {
            return Err(HarnessError::Setup(format!("{name} is not running")));
        }
        match actor {
            Actor::Proxy { node, .. } => {
                if let Some(mut n) = node.take() {
                    n.stop();
                }
            }
            Actor::B2bua { node, .. } => drop(node.take()),
            Actor::Trunk(t) => {
                let h = t.ladder();
                t.node = None;
                t.history = h;
            }
            Actor::Phone(p) => {
                let h = p.ladder();
                if let Some(n) = p.node.take() {
                    n.stop();
                }
                p.history = h;
            }
        }
        info!(actor = %name, "killed");
        Ok(())
    }

    pub fn phone(&self, name: &str) -> Result<&PhoneActor, HarnessError> {
        match self.actor(name) {
            Some(Actor::Phone(p)) => Ok(p),
            _ => Err(HarnessError::Setup(format!("{name} is not a phone"))),
        }
    }

    pub fn running_phone(&self, name: &str) -> Result<&Phone, HarnessError> {
        self.phone(name)?
            .node
            .as_ref()
            .ok_or_else(|| HarnessError::Setup(format!("{name} is not running")))
    }

    pub fn proxy_addr(&self, name: &str) -> Result<SocketAddr, HarnessError> {
        match self.actor(name) {
            Some(Actor::Proxy { cfg, .. }) => Ok(cfg.bind),
            _ => Err(HarnessError::Setup(format!("{name} is not a proxy"))),
        }
    }

    pub fn proxy_node(&self, name: &str) -> Option<&ProxyNode> {
        match self.actor(name) {
            Some(Actor::Proxy { node, .. }) => node.as_ref(),
            _ => None,
        }
    }

    pub fn trunk(&self, name: &str) -> Result<&TrunkActor, HarnessError> {
        match self.actor(name) {
            Some(Actor::Trunk(t)) => Ok(t),
            _ => Err(HarnessError::Setup(format!("{name} is not a trunk"))),
        }
    }

    /// Registers a phone through the named proxy.
    pub fn register(&self, phone: &str, proxy: &str) -> Result<(), HarnessError> {
        let p = self.phone(phone)?;
        let node = self.running_phone(phone)?;
        let cmd = SoftphoneCommand::Register {
            ext: p.ext.clone(),
            password: p.password.clone(),
            proxy: proxy.to_string(),
        };
        node.command(cmd, Some(self.proxy_addr(proxy)?))
            .map_err(HarnessError::Command)
    }

    /// Ladders of every phone and trunk, in declaration order.
    pub fn ladders(&self) -> Vec<(String, Vec<LadderEntry>)> {
        self.actors
            .iter()
            .filter_map(|(n, a)| match a {
                Actor::Phone(p) => Some((n.clone(), p.ladder())),
                Actor::Trunk(t) => Some((n.clone(), t.ladder())),
                _ => None,
            })
            .collect()
    }

    /// Stops everything: phones first so their hang-ups are not misread as
    /// failures by the servers.
    pub fn shutdown(&mut self) {
        for kind in [ActorKind::Phone, ActorKind::Trunk, ActorKind::B2bua, ActorKind::Proxy] {
            let names: Vec<String> = self
                .actors
                .iter()
                .filter(|(_, a)| a.kind() == kind && a.is_running())
                .map(|(n, _)| n.clone())
                .collect();
            for n in names {
                let _ = self.kill(&n);
            }
        }
    }
}

impl Drop for Topology {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn address_plan() {
        let p = AddressPlan { base: 10 };
        assert_eq!(p.phone(2).unwrap().to_string(), "127.0.1.12");
        assert_eq!(p.proxy(0).unwrap().to_string(), "127.0.2.10");
        assert_eq!(p.b2bua_internal().unwrap().to_string(), "127.0.3.10");
        assert_eq!(p.b2bua_external().unwrap().to_string(), "127.0.4.10");
        assert_eq!(p.trunk().unwrap().to_string(), "127.0.5.10");
        assert!(AddressPlan { base: 250 }.phone(5).is_err());
        assert!(AddressPlan { base: 0 }.phone(0).is_err());
    }
}
