//! Argument definitions.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "gatn", version, about = "Gated-attention multi-instance image classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset as PPM images, box sidecars and a manifest.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint, metrics log and resolved config.
    Train(RunArgs),
    /// Evaluate a checkpoint and print metrics as JSON.
    Eval(EvalArgs),
    /// Write semantic, attention and gated-channel heatmaps for one image.
    Visualize(VisualizeArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
}

macro_rules! config_flags {
    ($($(#[$meta:meta])* $field:ident),* $(,)?) => {
        /// One optional flag per configuration key; flags beat the config file.
        #[derive(Args, Debug, Default, Clone)]
        #[command(next_help_heading = "Configuration")]
        pub struct ConfigFlags {
            $(
                $(#[$meta])*
                #[arg(long, value_name = "VALUE")]
                pub $field: Option<String>,
            )*
        }

        impl ConfigFlags {
            /// `(key, value)` for every flag given, in key order.
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push((stringify!($field), v.clone()));
                    }
                )*
                out
            }
        }
    };
}

config_flags!(
    /// Number of classes
    classes,
    /// Synthetic image side in pixels
    image_size,
    min_instances,
    max_instances,
    radius_min,
    radius_max,
    /// Maximum distractor squares per image
    clutter,
    noise_amplitude,
    /// Rim-to-radius ratio of the first class
    rim_min,
    /// Rim-to-radius ratio of the last class
    rim_max,
    /// Generated training images per class
    train_per_class,
    /// Generated test images per class
    test_per_class,
    /// Base seed of the generated data
    data_seed,
    epochs,
    batch_size,
    /// Initial learning rate
    lr0,
    lr_decay_every,
    lr_decay_factor,
    /// Initial loss weight of the global branch
    lambda0,
    lambda_step,
    lambda_every,
    lambda_floor,
    momentum,
    /// Largest global gradient norm per step, or `none`
    clip_norm,
    /// Seed for initialization and shuffling
    seed,
    /// Global branch input side
    input_size,
    /// Comma-separated channel counts of the global backbone
    global_stages,
    /// Comma-separated channel counts of the instance backbone
    instance_stages,
    /// Two comma-separated dilation rates
    dilation_rates,
    /// Fix every attention gate at 1 (channel-average ablation)
    uniform_gates,
    pixel_mean,
    pixel_std,
    /// Enable the instance branch (true/false)
    fusion,
    /// Attention threshold relative to the map maximum
    rel_threshold,
    /// Instance patches per image
    top_k,
    /// Side of resized instance patches
    patch_size,
    min_component_area,
    /// Output directory
    #[arg(visible_alias = "out")]
    out_dir,
    /// Checkpoint path (default: OUT_DIR/model.gatn)
    checkpoint,
    /// Directory with manifest.txt to use instead of generated data
    data_dir,
);

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Flat `key = value` configuration file
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    /// Flat `key = value` configuration file
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<String>,
    /// Images per class
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    /// Base seed; image i of class c uses seed + c·per_class + i
    #[arg(long)]
    pub seed: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub image_size: Option<String>,
    #[arg(long)]
    pub min_instances: Option<String>,
    #[arg(long)]
    pub max_instances: Option<String>,
    #[arg(long)]
    pub radius_min: Option<String>,
    #[arg(long)]
    pub radius_max: Option<String>,
    #[arg(long)]
    pub clutter: Option<String>,
    #[arg(long)]
    pub noise_amplitude: Option<String>,
    #[arg(long)]
    pub rim_min: Option<String>,
    #[arg(long)]
    pub rim_max: Option<String>,
}

impl SynthArgs {
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        [
            ("classes", &self.classes),
            ("data_seed", &self.seed),
            ("image_size", &self.image_size),
            ("min_instances", &self.min_instances),
            ("max_instances", &self.max_instances),
            ("radius_min", &self.radius_min),
            ("radius_max", &self.radius_max),
            ("clutter", &self.clutter),
            ("noise_amplitude", &self.noise_amplitude),
            ("rim_min", &self.rim_min),
            ("rim_max", &self.rim_max),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.clone().map(|v| (k, v)))
        .collect()
    }
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Write selected boxes here, one `row0 col0 row1 col1 score` line each
    #[arg(long, value_name = "PATH")]
    pub boxes: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct VisualizeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// PPM image to visualize
    #[arg(long, value_name = "PATH", conflicts_with = "sample_seed")]
    pub image: Option<PathBuf>,
    /// Generate the synthetic image with this seed instead
    #[arg(long, value_name = "SEED")]
    pub sample_seed: Option<u64>,
    /// Class of the generated image
    #[arg(long = "class", value_name = "CLASS", default_value_t = 0)]
    pub sample_class: usize,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    /// Run only this check, or every check under this dotted prefix
    #[arg(long)]
    pub op: Option<String>,
    /// Multiplies analytic gradients; anything but 1 must fail
    #[arg(long, hide = true, default_value_t = 1.0)]
    pub analytic_scale: f64,
}
