//! Scratch probe: decompose reconstruction loss on a trained checkpoint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxharm::losses::{l1_loss, ssim_loss};
use voxharm::model::load_checkpoint;
use voxharm::phantom::read_manifest;
use voxharm::tensor::Tape;
use voxharm::volume::{crop_patch, read_volume, PatchSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = &args[1];
    let manifest_path = std::path::Path::new(&args[2]);
    let (model, _meta) = load_checkpoint(ckpt).unwrap();
    let manifest = read_manifest(manifest_path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1234);

    let mut tot_l1 = 0.0;
    let mut tot_ssim = 0.0;
    let mut n = 0;
    for entry in manifest.iter().step_by(5).take(8) {
        let vol = read_volume(voxharm::phantom::resolve_path(manifest_path, &entry.volume_path))
            .unwrap();
        for _ in 0..4 {
            let spec = PatchSpec::random(vol.dims, 16, &mut rng).unwrap();
            let patch = crop_patch(&vol, &spec).unwrap();
            let mut tape = Tape::new();
            let enc = model.encoder.bind(&mut tape, false);
            let dec = model.decoder.bind(&mut tape, false);
            let x = tape.leaf(patch);
            let pyr = enc.forward(&mut tape, x).unwrap();
            let pred = dec.forward(&mut tape, pyr.top()).unwrap();
            let l1 = l1_loss(&mut tape, pred, x).unwrap();
            let ss = ssim_loss(&mut tape, pred, x).unwrap();
            let in_mean: f32 =
                tape.data(x).iter().sum::<f32>() / tape.data(x).len() as f32;
            let pred_mean: f32 =
                tape.data(pred).iter().sum::<f32>() / tape.data(pred).len() as f32;
            println!(
                "site {} l1 {:.4} ssim {:.4} | input mean {:.3} pred mean {:.3}",
                entry.site_id,
                tape.scalar_value(l1),
                tape.scalar_value(ss),
                in_mean,
                pred_mean,
            );
            tot_l1 += tape.scalar_value(l1);
            tot_ssim += tape.scalar_value(ss);
            n += 1;
        }
    }
    println!("mean l1 {:.4} mean ssim {:.4}", tot_l1 / n as f32, tot_ssim / n as f32);
}
