use std::path::PathBuf;

use clap::{Args, Subcommand};
use serde_json::json;
use tcd_core::config::RunConfig;
use tcd_core::dataset::{self, coco, SplitResult};
use tcd_core::{Error, Result};

use crate::{require_file, set, Context, Outcome};

#[derive(Subcommand, Debug)]
pub enum DatasetCmd {
    /// Assign whole sources to a holdout set and k training folds.
    Split(SplitArgs),
    /// Write the COCO annotation file for one split.
    ExportCoco(ExportArgs),
    /// Rasterize COCO annotations into per-tile binary masks.
    Rasterize(RasterizeArgs),
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    /// JSON-lines source records.
    #[arg(long)]
    metadata: PathBuf,
    /// Biome polygons (GeoJSON with an integer `biome` property) for records without one.
    #[arg(long)]
    biomes: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// Target holdout fraction, measured in tiles.
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    metadata: PathBuf,
    /// Output of `tcd dataset split`.
    #[arg(long)]
    splits: PathBuf,
    /// COCO file holding annotations for all tiles.
    #[arg(long)]
    annotations: PathBuf,
    /// holdout | train | fold:<n> | train-except:<n>
    #[arg(long)]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RasterizeArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// Directory receiving `<image id>.tif` masks.
    #[arg(long)]
    out_dir: PathBuf,
    /// Only this image.
    #[arg(long)]
    image_id: Option<u64>,
}

impl DatasetCmd {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetCmd::Split(_) => "dataset split",
            DatasetCmd::ExportCoco(_) => "dataset export-coco",
            DatasetCmd::Rasterize(_) => "dataset rasterize",
        }
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        if let DatasetCmd::Split(a) = self {
            set(&mut cfg.k, a.k);
            set(&mut cfg.holdout_frac, a.holdout);
            set(&mut cfg.seed, a.seed);
        }
    }
}

pub fn run(cmd: DatasetCmd, ctx: &Context) -> Result<Outcome> {
    let mut out = Outcome::default();
    match cmd {
        DatasetCmd::Split(a) => {
            require_file(&a.metadata, "metadata")?;
            let mut records = dataset::read_records(&a.metadata)?;
            if let Some(b) = &a.biomes {
                require_file(b, "biomes")?;
                dataset::tag_biomes(&mut records, &dataset::read_biomes(b)?);
            }
            let cfg = &ctx.cfg;
            let splits = dataset::make_splits(&records, cfg.k, cfg.holdout_frac, cfg.seed)?;
            std::fs::write(&a.out, splits.to_json()?).map_err(Error::Io)?;
            out.output("splits", &a.out);
            out.extra.insert("summary".into(), serde_json::to_value(&splits.summary)?);
        }
        DatasetCmd::ExportCoco(a) => {
            for (p, what) in [(&a.metadata, "metadata"), (&a.splits, "splits"), (&a.annotations, "annotations")] {
                require_file(p, what)?;
            }
            let selector = coco::SplitSelector::parse(&a.split)?;
            let records = dataset::read_records(&a.metadata)?;
            let splits = SplitResult::from_json(&std::fs::read_to_string(&a.splits).map_err(Error::Io)?)?;
            let ds = coco::read_coco(&a.annotations)?;
            let (images, annotations) = coco::export_coco(selector, &records, &splits, &ds.annotations, &ds.images, &a.out)?;
            out.output("coco", &a.out);
            out.extra.insert("images".into(), json!(images));
            out.extra.insert("annotations".into(), json!(annotations));
        }
        DatasetCmd::Rasterize(a) => {
            require_file(&a.annotations, "annotations")?;
            let ds = coco::read_coco(&a.annotations)?;
            let paths = coco::rasterize_to_dir(&ds, &a.out_dir, a.image_id)?;
            out.output("masks", &a.out_dir);
            out.extra.insert("files".into(), json!(paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>()));
        }
    }
    Ok(out)
}
