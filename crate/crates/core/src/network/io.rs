//! Model persistence: a `DMEM1` checkpoint plus a plain-text manifest.

use std::path::Path;

use super::{build_layout, ArchConfig, Model};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::scalar::Scalar;

pub const CHECKPOINT_FILE: &str = "model.dmem";
pub const MANIFEST_FILE: &str = "manifest.txt";

impl ArchConfig {
    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("variant", self.variant);
        kv.set("stages", self.stages);
        kv.set("in_channels", self.in_channels);
        kv.set("initial_channels", self.initial_channels);
        kv.set("growth_rate", self.growth_rate);
        kv.set("layers_per_block", self.layers_per_block);
        kv.set("num_classes", self.num_classes);
        kv.set("input_height", self.input_size.0);
        kv.set("input_width", self.input_size.1);
    }

    /// Read fields present in `kv`, keeping `self`'s values for the rest.
    pub fn overlay_kv(&self, kv: &KeyValues) -> std::result::Result<Self, String> {
        let d = self;
        Ok(ArchConfig {
            variant: kv.parsed("variant")?.unwrap_or(d.variant),
            stages: kv.parsed("stages")?.unwrap_or(d.stages),
            in_channels: kv.parsed("in_channels")?.unwrap_or(d.in_channels),
            initial_channels: kv.parsed("initial_channels")?.unwrap_or(d.initial_channels),
            growth_rate: kv.parsed("growth_rate")?.unwrap_or(d.growth_rate),
            layers_per_block: kv.parsed("layers_per_block")?.unwrap_or(d.layers_per_block),
            num_classes: kv.parsed("num_classes")?.unwrap_or(d.num_classes),
            input_size: (
                kv.parsed("input_height")?.unwrap_or(d.input_size.0),
                kv.parsed("input_width")?.unwrap_or(d.input_size.1),
            ),
        })
    }
}

impl<T: Scalar> Model<T> {
    /// Write `model.dmem` and `manifest.txt` into `dir`; `extra` keys are
    /// appended to the manifest after the architecture fields.
    pub fn save(&self, dir: &Path, extra: &KeyValues) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&dir.join(CHECKPOINT_FILE), self.params.iter())?;
        let mut kv = KeyValues::new();
        kv.set("format", "dmem-manifest-1");
        self.cfg.write_kv(&mut kv);
        kv.set("parameters", self.parameter_count());
        kv.merge(extra);
        kv.save(&dir.join(MANIFEST_FILE))
    }

    /// Load a model saved by [`Model::save`], returning it with its manifest.
    pub fn load(dir: &Path) -> Result<(Self, KeyValues)> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let kv = KeyValues::load(&manifest_path)?;
        let cfg = ArchConfig::default()
            .overlay_kv(&kv)
            .map_err(|m| Error::format(&manifest_path, m))?;
        let (mut params, net) = build_layout::<T>(&cfg)?;
        let ckpt_path = dir.join(CHECKPOINT_FILE);
        let tensors = checkpoint::load::<T>(&ckpt_path)?;
        if tensors.len() != params.len() {
            return Err(Error::format(
                &ckpt_path,
                format!("{} tensors stored, architecture has {}", tensors.len(), params.len()),
            ));
        }
        for (name, t) in tensors {
            let id = params
                .find(&name)
                .ok_or_else(|| Error::format(&ckpt_path, format!("unexpected tensor {name}")))?;
            params.set(id, t)?;
        }
        Ok((Model { cfg, params, net }, kv))
    }
}
