use stcflow::checkpoint;
use stcflow::flow::{encode_flo, flow_to_color, load_rgb, save_rgb_png, FramePair};
use stcflow::network::{check_compatible, infer};
use stcflow::Params32;

use super::CheckpointHeader;
use crate::error::{CliResult, Context};
use crate::InferArgs;

pub fn run(args: &InferArgs) -> CliResult<()> {
    let (header, params): (CheckpointHeader, Params32) =
        checkpoint::load(&args.ckpt).context(|| format!("cannot load checkpoint {}", args.ckpt.display()))?;
    check_compatible(&header.network, &params).context(|| format!("checkpoint {}", args.ckpt.display()))?;
    let f1 = load_rgb::<f32>(&args.frame1).context(|| format!("cannot read {}", args.frame1.display()))?;
    let f2 = load_rgb::<f32>(&args.frame2).context(|| format!("cannot read {}", args.frame2.display()))?;
    let pair = FramePair::new(f1, f2)?;

    let flow = infer(&pair, &header.network, &params)?;
    // everything is computed before the first file is written
    let bytes = encode_flo(&flow)?;
    for path in std::iter::once(&args.out_flo).chain(&args.out_viz) {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).context(|| format!("cannot create {}", dir.display()))?;
        }
    }
    std::fs::write(&args.out_flo, bytes).context(|| format!("cannot write {}", args.out_flo.display()))?;
    if let Some(viz) = &args.out_viz {
        save_rgb_png(&flow_to_color(&flow, None), viz).context(|| format!("cannot write {}", viz.display()))?;
    }
    println!(
        "{}x{} flow, max magnitude {:.3} px -> {}",
        flow.height(),
        flow.width(),
        flow.max_magnitude(),
        args.out_flo.display()
    );
    Ok(())
}
