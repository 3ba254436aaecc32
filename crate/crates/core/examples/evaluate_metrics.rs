//! Scores a ranked link list against a known topology.

use sdenet::metrics::{binary_metrics, ranked_metrics};

fn main() -> sdenet::Result<()> {
    let truth = vec![
        vec![true, false, true],
        vec![true, true, false],
        vec![false, true, true],
    ];
    let scores = vec![
        vec![0.9, 0.2, 0.7],
        vec![0.4, 0.8, 0.4],
        vec![0.1, 0.35, 0.95],
    ];
    let predicted: Vec<Vec<bool>> = scores.iter().map(|r| r.iter().map(|&s| s > 0.5).collect()).collect();
    for exclude in [true, false] {
        let bin = binary_metrics(&predicted, &truth, exclude)?;
        let ranked = ranked_metrics(&scores, &truth, exclude)?;
        println!(
            "diagonal excluded: {exclude:<5}  TPR {:?}  PREC {:?}  AUROC {:.3}  AUPREC {:.3}",
            bin.tpr, bin.prec, ranked.auroc, ranked.auprec
        );
    }
    Ok(())
}
