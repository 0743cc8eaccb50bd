//! INI run configuration.
//!
//! ```ini
//! [data]
//! manifest = data/manifest.tsv   ; paths relative to this file
//!
//! [species.mouse]
//! magnification = 80
//! capture_spacing_um = 0.125
//! capture_size = 1024
//! working_size = 512
//!
//! [network]
//! base_channels = 32
//!
//! [training]
//! epochs = 200
//! lr = 0.001
//!
//! [experiment]
//! scenarios = M2H_VM, M2H_VH
//! out = runs
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use super::scenario::Scenario;
use crate::data::{Species, SpeciesProfile};
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::training::{Augmentation, EmitRule, KeepPolicy, LeftoverPolicy, TrainingConfig};

pub const DEFAULT_METHOD: &str = "dynhead";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Manifest per species; species without an entry use `default_manifest`.
    pub manifests: BTreeMap<Species, PathBuf>,
    pub default_manifest: Option<PathBuf>,
    /// Root the manifest paths are relative to; defaults to the manifest's directory.
    pub data_root: Option<PathBuf>,
    pub profiles: BTreeMap<Species, SpeciesProfile>,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub scenarios: Vec<Scenario>,
    pub method: String,
    pub out_dir: PathBuf,
    /// Skip training and evaluate this checkpoint directory instead.
    pub checkpoint: Option<PathBuf>,
    /// Raw bytes of the file this was parsed from (hashed into reports).
    pub source_text: String,
    pub source_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifests: BTreeMap::new(),
            default_manifest: None,
            data_root: None,
            profiles: Species::ALL
                .iter()
                .map(|s| (*s, SpeciesProfile::default_for(*s)))
                .collect(),
            network: NetworkConfig::default(),
            training: TrainingConfig::default(),
            scenarios: Vec::new(),
            method: DEFAULT_METHOD.to_string(),
            out_dir: PathBuf::from("runs"),
            checkpoint: None,
            source_text: String::new(),
            source_path: None,
        }
    }
}

// Section view that remembers which keys were read, so leftovers can be
// reported as typos.
struct Section<'a> {
    name: String,
    props: Vec<(&'a str, &'a str)>,
    used: BTreeSet<&'a str>,
}

impl<'a> Section<'a> {
    fn get(&mut self, key: &str) -> Option<&'a str> {
        let hit = self.props.iter().find(|(k, _)| *k == key).copied();
        hit.map(|(k, v)| {
            self.used.insert(k);
            v.trim()
        })
    }

    fn parse<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                Error::Config(format!("[{}] {key} = '{v}' is not a valid value", self.name))
            }),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.parse(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        for (k, _) in &self.props {
            if !self.used.contains(k) {
                return Err(Error::Config(format!("unknown key '{k}' in [{}]", self.name)));
            }
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::parse(&text, base)?;
        cfg.source_path = Some(path.to_path_buf());
        Ok(cfg)
    }

    /// Parses INI text; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("config syntax: {e}")))?;
        let mut cfg = RunConfig {
            source_text: text.to_string(),
            ..Default::default()
        };
        for (name, props) in ini.iter() {
            let Some(name) = name else {
                if props.iter().next().is_some() {
                    return Err(Error::Config("keys outside a section".into()));
                }
                continue;
            };
            let mut sec = Section {
                name: name.to_string(),
                props: props.iter().collect(),
                used: BTreeSet::new(),
            };
            match name {
                "data" => {
                    cfg.default_manifest = sec.get("manifest").map(|p| resolve(base, p));
                    cfg.data_root = sec.get("root").map(|p| resolve(base, p));
                }
                "network" => cfg.read_network(&mut sec)?,
                "training" => cfg.read_training(&mut sec)?,
                "experiment" => cfg.read_experiment(&mut sec, base)?,
                other => match other.strip_prefix("species.") {
                    Some(sp) => {
                        let species: Species = sp.parse()?;
                        if let Some(m) = sec.get("manifest") {
                            cfg.manifests.insert(species, resolve(base, m));
                        }
                        let profile = cfg.profiles.get_mut(&species).expect("all species have defaults");
                        sec.set("magnification", &mut profile.magnification)?;
                        sec.set("capture_spacing_um", &mut profile.capture_spacing_um)?;
                        sec.set("capture_size", &mut profile.capture_size)?;
                        sec.set("working_size", &mut profile.working_size)?;
                    }
                    None => return Err(Error::Config(format!("unknown section [{other}]"))),
                },
            }
            sec.finish()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn read_network(&mut self, sec: &mut Section) -> Result<()> {
        let n = &mut self.network;
        sec.set("num_classes", &mut n.num_classes)?;
        sec.set("in_channels", &mut n.in_channels)?;
        sec.set("base_channels", &mut n.base_channels)?;
        sec.set("depth", &mut n.depth)?;
        sec.set("decoder_channels", &mut n.decoder_channels)?;
        sec.set("head_channels", &mut n.head_channels)?;
        sec.set("seed", &mut n.seed)?;
        Ok(())
    }

    fn read_training(&mut self, sec: &mut Section) -> Result<()> {
        let t = &mut self.training;
        sec.set("epochs", &mut t.epochs)?;
        sec.set("lr", &mut t.adam.learning_rate)?;
        sec.set("beta1", &mut t.adam.beta1)?;
        sec.set("beta2", &mut t.adam.beta2)?;
        sec.set("eps", &mut t.adam.eps)?;
        sec.set("batch_size", &mut t.pool.batch_size)?;
        sec.set("pool_capacity", &mut t.pool.capacity)?;
        sec.set("seed", &mut t.seed)?;
        sec.set("threshold", &mut t.threshold)?;
        if let Some(v) = sec.get("emit_rule") {
            t.pool.emit_rule = match v {
                "strictly_exceeds" => EmitRule::StrictlyExceeds,
                "reaches" => EmitRule::Reaches,
                _ => return Err(Error::Config(format!("emit_rule '{v}': use strictly_exceeds or reaches"))),
            };
        }
        if let Some(v) = sec.get("leftover") {
            t.pool.leftover = match v {
                "drop" => LeftoverPolicy::Drop,
                "carry" => LeftoverPolicy::Carry,
                _ => return Err(Error::Config(format!("leftover '{v}': use drop or carry"))),
            };
        }
        if let Some(v) = sec.get("keep") {
            t.keep = match v.split_once(':') {
                None if v == "all" => KeepPolicy::All,
                Some(("best", k)) => KeepPolicy::Best(
                    k.trim()
                        .parse()
                        .ok()
                        .filter(|&k| k > 0)
                        .ok_or_else(|| Error::Config(format!("keep '{v}': k must be ≥ 1")))?,
                ),
                _ => return Err(Error::Config(format!("keep '{v}': use all or best:<k>"))),
            };
        }
        if let Some(v) = sec.get("augmentation") {
            t.augmentation = match v {
                "none" => Augmentation::None,
                "flips" => Augmentation::Flips,
                _ => return Err(Error::Config(format!("augmentation '{v}': use none or flips"))),
            };
        }
        Ok(())
    }

    fn read_experiment(&mut self, sec: &mut Section, base: &Path) -> Result<()> {
        if let Some(list) = sec.get("scenarios").or_else(|| sec.get("scenario")) {
            self.scenarios = parse_scenarios(list)?;
        }
        if let Some(m) = sec.get("method") {
            self.method = m.to_string();
        }
        if let Some(o) = sec.get("out") {
            self.out_dir = resolve(base, o);
        }
        self.checkpoint = sec.get("checkpoint").map(|p| resolve(base, p));
        // one seed for both network init and data order unless set separately
        if let Some(seed) = sec.parse::<u64>("seed")? {
            self.network.seed = seed;
            self.training.seed = seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.training.pool.validate()?;
        for p in self.profiles.values() {
            p.validate()?;
        }
        let t = &self.training;
        if !(t.adam.learning_rate > 0.0) || !(0.0..1.0).contains(&t.adam.beta1) || !(0.0..1.0).contains(&t.adam.beta2) || !(t.adam.eps > 0.0) {
            return Err(Error::Config("adam settings out of range".into()));
        }
        if !(t.threshold > 0.0 && t.threshold < 1.0) {
            return Err(Error::Config("threshold must be in (0, 1)".into()));
        }
        if self.method.is_empty() || self.method.contains([',', '|', '\n']) {
            return Err(Error::Config(format!("method id '{}' must be non-empty without , or |", self.method)));
        }
        Ok(())
    }

    pub fn manifest_for(&self, species: Species) -> Option<&Path> {
        self.manifests
            .get(&species)
            .or(self.default_manifest.as_ref())
            .map(PathBuf::as_path)
    }

    /// Hex SHA-256 of the config file contents.
    pub fn config_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.source_text.as_bytes()))
    }
}

pub fn parse_scenarios(list: &str) -> Result<Vec<Scenario>> {
    if list.trim().eq_ignore_ascii_case("all") {
        return Ok(Scenario::ALL.to_vec());
    }
    let out: Vec<Scenario> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Config("no scenarios listed".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "\
[data]
manifest = d/manifest.tsv

[species.human]
working_size = 64
capture_size = 128

[network]
base_channels = 8
depth = 3

[training]
epochs = 5
lr = 0.002
leftover = carry
keep = best:2

[experiment]
scenarios = M2H_VM, H2H
seed = 11
out = out
";

    #[test]
    fn parses_and_resolves() {
        let cfg = RunConfig::parse(TEXT, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.default_manifest.as_deref(), Some(Path::new("/cfg/d/manifest.tsv")));
        assert_eq!(cfg.manifest_for(Species::Mouse), Some(Path::new("/cfg/d/manifest.tsv")));
        assert_eq!(cfg.profiles[&Species::Human].working_size, 64);
        assert_eq!(cfg.profiles[&Species::Mouse], SpeciesProfile::mouse_default());
        assert_eq!(cfg.network.base_channels, 8);
        assert_eq!((cfg.network.seed, cfg.training.seed), (11, 11));
        assert_eq!(cfg.training.epochs, 5);
        assert_eq!(cfg.training.keep, KeepPolicy::Best(2));
        assert_eq!(cfg.training.pool.leftover, LeftoverPolicy::Carry);
        assert_eq!(cfg.scenarios, vec![Scenario::M2hVm, Scenario::H2h]);
        assert_eq!(cfg.out_dir, Path::new("/cfg/out"));
        assert_eq!(cfg.config_hash().len(), 64);
    }

    #[test]
    fn rejects_typos_and_bad_values() {
        let typo = TEXT.replace("epochs = 5", "epoch = 5");
        assert!(RunConfig::parse(&typo, Path::new(".")).unwrap_err().to_string().contains("epoch"));
        let bad = TEXT.replace("lr = 0.002", "lr = fast");
        assert!(RunConfig::parse(&bad, Path::new(".")).is_err());
        let sec = TEXT.replace("[network]", "[netwrk]");
        assert!(RunConfig::parse(&sec, Path::new(".")).is_err());
        let sp = TEXT.replace("[species.human]", "[species.rat]");
        assert!(RunConfig::parse(&sp, Path::new(".")).is_err());
    }
}
