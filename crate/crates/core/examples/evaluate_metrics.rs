//! Scores predicted label masks with Dice, Hausdorff and HD95 and prints the
//! JSON report.

use transdae::metrics::{dice, evaluate, hausdorff, HausdorffKind, LabelMask};

/// A filled axis-aligned square of class `cls` on a 16x16 canvas.
fn square(top: usize, left: usize, side: usize, cls: u8) -> LabelMask {
    LabelMask::from_fn(vec![16, 16], |i| {
        let (y, x) = (i / 16, i % 16);
        let inside = (top..top + side).contains(&y) && (left..left + side).contains(&x);
        if inside { cls } else { 0 }
    })
    .expect("shape matches data")
}

fn main() -> transdae::Result<()> {
    let truth = square(4, 4, 6, 1);
    let shifted = square(4, 7, 6, 1);
    println!("dice(truth, truth)   = {}", dice(&truth, &truth, 1)?);
    println!("dice(truth, shifted) = {:.4}", dice(&truth, &shifted, 1)?);
    println!("hd(truth, shifted)   = {:?}", hausdorff(&truth, &shifted, 1, HausdorffKind::Max)?);
    println!("hd95(truth, shifted) = {:?}", hausdorff(&truth, &shifted, 1, HausdorffKind::P95)?);

    // class 2 is missing from the prediction, so its distances are undefined
    let gts = vec![truth.clone(), square(2, 2, 3, 2)];
    let preds = vec![shifted, LabelMask::new(vec![16, 16], vec![0; 256])?];
    let report = evaluate(&preds, &gts, 3, None)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
    Ok(())
}
