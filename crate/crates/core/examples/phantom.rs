//! Generates a few phantom cases and prints what is in them.

use uad::phantom::{make_phantom_corpus, LesionKind};

fn main() -> uad::Result<()> {
    for kind in [LesionKind::None, LesionKind::Disc, LesionKind::Diffuse] {
        for case in make_phantom_corpus(2, 7, kind)? {
            let m = case.mask_of("reference").expect("phantoms carry a reference mask");
            let labels: Vec<String> =
                m.present_labels().iter().map(|l| format!("{}={}", m.label_names()[l], m.count(*l))).collect();
            println!("{:<24} {:?} {}", case.volume.id(), case.volume.shape(), labels.join(" "));
        }
    }
    Ok(())
}
