//! Run configuration: flat `key = value` text plus overrides.
//!
//! Blank lines and `#` comments are ignored. Layers are a comma-separated
//! list of `kind/c_o/k/stride/padding/c_gixc_go`, where `kind` is `R`, `F`
//! or `std`, for example `F/16/3/1/1/8x4`. Constraints wider than a layer's
//! channels are clamped when the model is built.

use std::fmt;
use std::path::PathBuf;

use crate::data::Augment;
use crate::error::{LhcError, Result};
use crate::layer::{ShapeMode, TopologyConstraints};
use crate::model::{LayerKind, LayerSpec};
use crate::objective::ScaleSource;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    /// CIFAR-10 binary batch file or directory of them.
    Cifar10(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub layers: Vec<LayerSpec>,
    /// `None` is the `invalid` target: no mask loss.
    pub d_t: Option<f64>,
    pub alpha_t: f64,
    pub n_warm: usize,
    /// Which task loss scales the mask-loss weight.
    pub alpha_scale: ScaleSource,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// 1-based epochs at whose start the learning rate is multiplied by
    /// `lr_decay`.
    pub lr_decay_epochs: Vec<usize>,
    /// Epochs without test-accuracy improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub dataset: DatasetKind,
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub classes: usize,
    pub batch_size: usize,
    pub augment: Augment,
    /// Learning-rate multiplier for the effect factors.
    pub effect_lr_scale: f64,
    /// Train with every mask disabled, as a dense baseline.
    pub dense: bool,
}

/// `(key, default, description)` for every recognised key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "(required)", "RNG seed for init, data order, augmentation and mask enabling"),
    ("layers", "F/16/3/1/1/8x4,F/32/3/2/1/8x4,F/32/3/1/1/8x4,F/64/3/2/1/8x4", "convolution stack kind/c_o/k/stride/padding/c_gixc_go"),
    ("d_t", "0.25", "global density target in [0,1], or `invalid` for none"),
    ("alpha_t", "1.0", "final mask-loss weight multiplier"),
    ("n_warm", "10", "warm-up epochs shared by mask enabling and the alpha ramp"),
    ("alpha_scale", "first", "task loss that scales alpha: `first` epoch, or `latest` during warm-up"),
    ("epochs", "40", "maximum training epochs"),
    ("lr", "0.05", "initial SGD learning rate"),
    ("lr_decay", "0.1", "factor applied at each decay epoch"),
    ("lr_decay_epochs", "", "comma-separated 1-based epochs where the rate decays"),
    ("patience", "0", "early-stop patience in epochs, 0 to disable"),
    ("dataset", "synthetic", "`synthetic` or a CIFAR-10 binary file/directory"),
    ("n_train", "800", "training samples (cap for CIFAR-10)"),
    ("n_test", "200", "held-out samples"),
    ("image_size", "16", "synthetic image side; CIFAR-10 is always 32"),
    ("classes", "10", "synthetic class count"),
    ("batch_size", "25", "samples per SGD step"),
    ("augment_flip", "false", "random horizontal flips"),
    ("augment_translate", "0", "maximum random shift in pixels"),
    ("effect_lr_scale", "100", "learning-rate multiplier for effect factors"),
    ("dense", "false", "disable every mask (dense baseline)"),
];

impl RunConfig {
    /// Defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        let mut text = format!("seed = {seed}\n");
        for (k, v, _) in KEYS {
            if *k != "seed" && !v.is_empty() {
                text.push_str(&format!("{k} = {v}\n"));
            }
        }
        Self::parse(&text, &[]).expect("defaults parse")
    }

    /// Parses config text, then applies `key=value` overrides in order.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut b = Builder::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| LhcError::Config {
                line: n + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            b.set(k.trim(), v.trim()).map_err(|msg| LhcError::Config { line: n + 1, msg })?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| LhcError::Config {
                line: 0,
                msg: format!("override `{o}` is not key=value"),
            })?;
            b.set(k.trim(), v.trim()).map_err(|msg| LhcError::Config { line: 0, msg })?;
        }
        b.finish()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay.powi(decays as i32)
    }

    /// Same run with every layer standard and no density target.
    pub fn dense_baseline(&self) -> Self {
        let mut c = self.clone();
        c.dense = true;
        c.d_t = None;
        c
    }
}

fn fmt_layer(s: &LayerSpec) -> String {
    let kind = match s.kind {
        LayerKind::Lhc(ShapeMode::Rigid) => "R",
        LayerKind::Lhc(ShapeMode::Free) => "F",
        LayerKind::Standard => "std",
    };
    format!(
        "{kind}/{}/{}/{}/{}/{}x{}",
        s.c_o, s.k, s.stride, s.padding, s.constraints.c_gi, s.constraints.c_go
    )
}

impl fmt::Display for RunConfig {
    /// Writes the config back in the text format it was parsed from.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed = {}", self.seed)?;
        let layers: Vec<String> = self.layers.iter().map(fmt_layer).collect();
        writeln!(f, "layers = {}", layers.join(","))?;
        match self.d_t {
            Some(d) => writeln!(f, "d_t = {d}")?,
            None => writeln!(f, "d_t = invalid")?,
        }
        writeln!(f, "alpha_t = {}", self.alpha_t)?;
        writeln!(f, "n_warm = {}", self.n_warm)?;
        let scale = match self.alpha_scale {
            ScaleSource::FirstEpoch => "first",
            ScaleSource::LatestEpoch => "latest",
        };
        writeln!(f, "alpha_scale = {scale}")?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "lr = {}", self.lr)?;
        writeln!(f, "lr_decay = {}", self.lr_decay)?;
        let de: Vec<String> = self.lr_decay_epochs.iter().map(|e| e.to_string()).collect();
        writeln!(f, "lr_decay_epochs = {}", de.join(","))?;
        writeln!(f, "patience = {}", self.patience)?;
        match &self.dataset {
            DatasetKind::Synthetic => writeln!(f, "dataset = synthetic")?,
            DatasetKind::Cifar10(p) => writeln!(f, "dataset = {}", p.display())?,
        }
        writeln!(f, "n_train = {}", self.n_train)?;
        writeln!(f, "n_test = {}", self.n_test)?;
        writeln!(f, "image_size = {}", self.image_size)?;
        writeln!(f, "classes = {}", self.classes)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "augment_flip = {}", self.augment.flip)?;
        writeln!(f, "augment_translate = {}", self.augment.translate)?;
        writeln!(f, "effect_lr_scale = {}", self.effect_lr_scale)?;
        writeln!(f, "dense = {}", self.dense)
    }
}

pub fn parse_layer(text: &str) -> std::result::Result<LayerSpec, String> {
    let parts: Vec<&str> = text.trim().split('/').collect();
    if parts.len() != 6 {
        return Err(format!(
            "layer `{text}` needs kind/c_o/k/stride/padding/c_gixc_go"
        ));
    }
    let kind = match parts[0] {
        "R" | "r" => LayerKind::Lhc(ShapeMode::Rigid),
        "F" | "f" => LayerKind::Lhc(ShapeMode::Free),
        "std" => LayerKind::Standard,
        other => return Err(format!("unknown layer kind `{other}`")),
    };
    let num = |s: &str, what: &str| -> std::result::Result<usize, String> {
        s.parse::<usize>()
            .map_err(|_| format!("layer `{text}`: {what} `{s}` is not a whole number"))
    };
    let c_o = num(parts[1], "c_o")?;
    let k = num(parts[2], "k")?;
    let stride = num(parts[3], "stride")?;
    let padding = num(parts[4], "padding")?;
    let (gi, go) = parts[5]
        .split_once('x')
        .ok_or_else(|| format!("layer `{text}`: constraints must look like 8x4"))?;
    let constraints = TopologyConstraints::new(num(gi, "c_gi")?, num(go, "c_go")?)
        .map_err(|e| e.to_string())?;
    if c_o == 0 || k == 0 {
        return Err(format!("layer `{text}`: c_o and k must be positive"));
    }
    if !(1..=2).contains(&stride) {
        return Err(format!("layer `{text}`: stride must be 1 or 2"));
    }
    if matches!(kind, LayerKind::Lhc(ShapeMode::Rigid)) && k != 3 {
        return Err(format!("layer `{text}`: rigid shapes are defined for k = 3"));
    }
    Ok(LayerSpec {
        kind,
        c_o,
        k,
        stride,
        padding,
        constraints,
    })
}

#[derive(Default)]
struct Builder {
    seed: Option<u64>,
    layers: Option<Vec<LayerSpec>>,
    d_t: Option<Option<f64>>,
    alpha_t: Option<f64>,
    n_warm: Option<usize>,
    alpha_scale: Option<ScaleSource>,
    epochs: Option<usize>,
    lr: Option<f64>,
    lr_decay: Option<f64>,
    lr_decay_epochs: Option<Vec<usize>>,
    patience: Option<usize>,
    dataset: Option<DatasetKind>,
    n_train: Option<usize>,
    n_test: Option<usize>,
    image_size: Option<usize>,
    classes: Option<usize>,
    batch_size: Option<usize>,
    flip: Option<bool>,
    translate: Option<usize>,
    effect_lr_scale: Option<f64>,
    dense: Option<bool>,
}

type Parsed<T> = std::result::Result<T, String>;

fn whole(key: &str, v: &str) -> Parsed<usize> {
    v.parse().map_err(|_| format!("{key}: `{v}` is not a whole number"))
}

fn real(key: &str, v: &str) -> Parsed<f64> {
    let x: f64 = v.parse().map_err(|_| format!("{key}: `{v}` is not a number"))?;
    if !x.is_finite() {
        return Err(format!("{key}: `{v}` is not finite"));
    }
    Ok(x)
}

fn flag(key: &str, v: &str) -> Parsed<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: `{v}` is not true/false")),
    }
}

fn list<T>(v: &str, f: impl Fn(&str) -> Parsed<T>) -> Parsed<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect()
}

impl Builder {
    fn set(&mut self, key: &str, v: &str) -> Parsed<()> {
        match key {
            "seed" => self.seed = Some(v.parse().map_err(|_| format!("seed: `{v}` is not a u64"))?),
            "layers" => {
                let l = list(v, parse_layer)?;
                if l.is_empty() {
                    return Err("layers: at least one layer is required".into());
                }
                self.layers = Some(l);
            }
            "d_t" => {
                self.d_t = Some(if v == "invalid" {
                    None
                } else {
                    let d = real(key, v)?;
                    if !(0.0..=1.0).contains(&d) {
                        return Err(format!("d_t: {d} outside [0, 1]"));
                    }
                    Some(d)
                })
            }
            "alpha_t" => {
                let a = real(key, v)?;
                if a <= 0.0 {
                    return Err("alpha_t must be positive".into());
                }
                self.alpha_t = Some(a);
            }
            "n_warm" => {
                let n = whole(key, v)?;
                if n == 0 {
                    return Err("n_warm must be positive".into());
                }
                self.n_warm = Some(n);
            }
            "alpha_scale" => {
                self.alpha_scale = Some(match v {
                    "first" => ScaleSource::FirstEpoch,
                    "latest" => ScaleSource::LatestEpoch,
                    _ => return Err(format!("alpha_scale: `{v}` is not first/latest")),
                })
            }
            "epochs" => self.epochs = Some(whole(key, v)?),
            "lr" => {
                let a = real(key, v)?;
                if a <= 0.0 {
                    return Err("lr must be positive".into());
                }
                self.lr = Some(a);
            }
            "lr_decay" => {
                let a = real(key, v)?;
                if a <= 0.0 {
                    return Err("lr_decay must be positive".into());
                }
                self.lr_decay = Some(a);
            }
            "lr_decay_epochs" => self.lr_decay_epochs = Some(list(v, |s| whole(key, s))?),
            "patience" => self.patience = Some(whole(key, v)?),
            "dataset" => {
                self.dataset = Some(match v {
                    "synthetic" => DatasetKind::Synthetic,
                    "" => return Err("dataset: empty path".into()),
                    p => DatasetKind::Cifar10(PathBuf::from(p)),
                })
            }
            "n_train" => self.n_train = Some(whole(key, v)?),
            "n_test" => self.n_test = Some(whole(key, v)?),
            "image_size" => {
                let n = whole(key, v)?;
                if n == 0 {
                    return Err("image_size must be positive".into());
                }
                self.image_size = Some(n);
            }
            "classes" => {
                let n = whole(key, v)?;
                if n < 2 {
                    return Err("classes must be at least 2".into());
                }
                self.classes = Some(n);
            }
            "batch_size" => {
                let n = whole(key, v)?;
                if n == 0 {
                    return Err("batch_size must be positive".into());
                }
                self.batch_size = Some(n);
            }
            "augment_flip" => self.flip = Some(flag(key, v)?),
            "augment_translate" => self.translate = Some(whole(key, v)?),
            "effect_lr_scale" => {
                let a = real(key, v)?;
                if a < 0.0 {
                    return Err("effect_lr_scale must be non-negative".into());
                }
                self.effect_lr_scale = Some(a);
            }
            "dense" => self.dense = Some(flag(key, v)?),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    fn finish(self) -> Result<RunConfig> {
        let cfg = |msg: String| LhcError::Config { line: 0, msg };
        let seed = self.seed.ok_or_else(|| cfg("seed is required".into()))?;
        let mut d = Builder::default();
        for (k, v, _) in KEYS {
            if *k != "seed" {
                d.set(k, v).map_err(cfg)?;
            }
        }
        Ok(RunConfig {
            layers: self.layers.or(d.layers).expect("default layers"),
            d_t: self.d_t.or(d.d_t).expect("default d_t"),
            alpha_t: self.alpha_t.or(d.alpha_t).expect("default"),
            n_warm: self.n_warm.or(d.n_warm).expect("default"),
            alpha_scale: self.alpha_scale.or(d.alpha_scale).expect("default"),
            epochs: self.epochs.or(d.epochs).expect("default"),
            lr: self.lr.or(d.lr).expect("default"),
            lr_decay: self.lr_decay.or(d.lr_decay).expect("default"),
            lr_decay_epochs: self.lr_decay_epochs.or(d.lr_decay_epochs).unwrap_or_default(),
            patience: self.patience.or(d.patience).expect("default"),
            seed,
            dataset: self.dataset.or(d.dataset).expect("default"),
            n_train: self.n_train.or(d.n_train).expect("default"),
            n_test: self.n_test.or(d.n_test).expect("default"),
            image_size: self.image_size.or(d.image_size).expect("default"),
            classes: self.classes.or(d.classes).expect("default"),
            batch_size: self.batch_size.or(d.batch_size).expect("default"),
            augment: Augment {
                flip: self.flip.or(d.flip).expect("default"),
                translate: self.translate.or(d.translate).expect("default"),
            },
            effect_lr_scale: self.effect_lr_scale.or(d.effect_lr_scale).expect("default"),
            dense: self.dense.or(d.dense).expect("default"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_reference_model() {
        let c = RunConfig::with_seed(9);
        assert_eq!(c.seed, 9);
        assert_eq!(c.layers.len(), 4);
        assert_eq!(
            c.layers.iter().map(|l| l.c_o).collect::<Vec<_>>(),
            vec![16, 32, 32, 64]
        );
        assert!(c
            .layers
            .iter()
            .all(|l| l.kind == LayerKind::Lhc(ShapeMode::Free)
                && l.constraints == TopologyConstraints { c_gi: 8, c_go: 4 }));
        assert_eq!(c.d_t, Some(0.25));
        assert_eq!((c.alpha_t, c.n_warm, c.epochs), (1.0, 10, 40));
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(
            RunConfig::parse("epochs = 3", &[]),
            Err(LhcError::Config { .. })
        ));
    }

    #[test]
    fn invalid_target_and_overrides() {
        let c = RunConfig::parse(
            "seed = 1 # trailing comment\n\n d_t = invalid\nepochs=5",
            &["epochs=7".into(), "layers=R/8/3/2/1/2x2, std/4/1/1/0/1x1".into()],
        )
        .unwrap();
        assert_eq!(c.d_t, None);
        assert_eq!(c.epochs, 7);
        assert_eq!(c.layers[0].kind, LayerKind::Lhc(ShapeMode::Rigid));
        assert_eq!(c.layers[0].stride, 2);
        assert_eq!(c.layers[1].kind, LayerKind::Standard);
        assert_eq!(c.layers[1].k, 1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        for (text, line) in [
            ("seed = 1\nd_t = 1.5", 2),
            ("seed = 1\n\nlayers = F/16/3/3/1/8x4", 3),
            ("bogus", 1),
            ("seed = 1\ncolour = red", 2),
            ("seed = 1\nlayers = F/16/3/1/1/0x4", 2),
        ] {
            match RunConfig::parse(text, &[]) {
                Err(LhcError::Config { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn display_round_trips() {
        let mut c = RunConfig::with_seed(4);
        c.d_t = None;
        c.lr_decay_epochs = vec![20, 30];
        c.alpha_scale = ScaleSource::LatestEpoch;
        c.dataset = DatasetKind::Cifar10("/data/cifar".into());
        let again = RunConfig::parse(&c.to_string(), &[]).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn learning_rate_schedule() {
        let c = RunConfig::parse("seed=1\nlr=0.01\nlr_decay=0.5\nlr_decay_epochs=3,5", &[]).unwrap();
        assert_eq!(c.lr_at(1), 0.01);
        assert_eq!(c.lr_at(3), 0.005);
        assert_eq!(c.lr_at(6), 0.0025);
    }
}
