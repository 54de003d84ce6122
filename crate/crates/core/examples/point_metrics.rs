//! Scores predicted points against annotations with one-to-one matching at
//! two distance thresholds.

use fsol::metrics::{match_points, Evaluator, Point, PointSet, SigmaPreset};

fn main() -> fsol::Result<()> {
    let gt = vec![Point::new(0.0, 0.0), Point::new(6.0, 0.0), Point::new(40.0, 40.0)];
    let pred = vec![Point::new(5.0, 0.0), Point::new(14.0, 0.0), Point::new(47.0, 40.0), Point::new(60.0, 5.0)];

    let m = match_points(&pred, &gt, 8.5)?;
    for p in &m.pairs {
        println!("pred {} -> gt {}  distance {:.2}", p.pred, p.gt, p.distance);
    }
    println!("tp {} fp {} fn {}", m.tp, m.fp, m.fn_);

    let mut ev = Evaluator::new(&SigmaPreset::GENERAL.sigmas())?;
    ev.add(&PointSet::new("scene", pred), &PointSet::new("scene", gt))?;
    print!("{}", ev.report()?.to_text());
    Ok(())
}
