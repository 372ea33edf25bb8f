// diagnostic: evaluate teacher branch of existing checkpoints
use hdc_core::metrics::evaluate_model;
use hdc_core::model::ModelState;
use hdc_core::synth::{read_manifest, Split};
use hdc_core::trainer::load_checkpoint;

fn main() {
    let manifest = read_manifest(std::path::Path::new("/tmp/ds500/manifest.txt")).unwrap();
    for run in ["p_sup_1e3", "s_pix", "s_pixcg", "s_pixmi", "s_full_small_betas", "p_full_1e3"] {
        let session = load_checkpoint(std::path::Path::new(&format!("/tmp/{run}/checkpoint.hdc"))).unwrap();
        let student = evaluate_model(&session.state, &manifest, Split::Test).unwrap();
        // teacher-as-model: swap teacher params into the student-main slots
        let mut tstate = session.state.clone();
        tstate.encoder = tstate.t_encoder.clone();
        tstate.dec_main = tstate.t_decoder.clone();
        let teacher = evaluate_model(&tstate, &manifest, Split::Test).unwrap();
        println!("{run:24} student={:.4} teacher={:.4}", student.mean.dsc, teacher.mean.dsc);
    }
}
