//! Tracking and detection metrics on a small hand-made sequence: one car
//! tracked cleanly, a second one whose track id changes halfway.

use cooptrack::eval::{amota, clear_mot, map_detection, PredBox, Sequence};
use cooptrack::geometry::{Box3D, CAR};

fn car(x: f64, y: f64, score: f64) -> Box3D {
    Box3D::from_array([x, y, 0.0, 1.8, 4.5, 1.6, 0.0, 5.0, 0.0], CAR, score)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let frames = 8;
    let mut seq = Sequence::default();
    for t in 0..frames {
        let x = 0.5 * t as f64;
        seq.gt.push(vec![(1, car(x, 0.0, 1.0)), (2, car(x, 6.0, 1.0))]);
        let second_id = if t < frames / 2 { 20 } else { 21 };
        seq.preds.push(vec![
            PredBox { id: 10, bbox: car(x + 0.2, 0.1, 0.9) },
            PredBox { id: second_id, bbox: car(x - 0.3, 6.2, 0.6) },
        ]);
    }
    let seqs = [seq];
    let mot = clear_mot(&seqs, 2.0, 0.0);
    println!("CLEAR: tp {} fp {} fn {} ids {} MOTA {:.3}", mot.tp, mot.fp, mot.fn_, mot.ids, mot.mota());
    let t = amota(&seqs, 2.0)?;
    println!("AMOTA {:.3} (raw {:.3}), AMOTP {:.3} m", t.amota, t.amota_raw, t.amotp);
    let d = map_detection(&seqs)?;
    println!("mAP {:.3}, AP per radius {:.3?}, ATE {:.3} m", d.map, d.ap, d.ate);
    Ok(())
}
