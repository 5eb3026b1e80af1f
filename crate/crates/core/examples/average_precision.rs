// SPDX-License-Identifier: MIT OR Apache-2.0

//! Precision-recall curve and step-wise AP, including tied scores.

use vitprobe::metrics::{average_precision, pr_curve, thresholded_stats};

fn main() -> vitprobe::Result<()> {
    let scores = [0.9, 0.8, 0.8, 0.7, 0.4, 0.4, 0.2, 0.1];
    let labels = [true, true, false, true, false, true, false, false];
    println!("threshold  precision  recall");
    for p in pr_curve(&scores, &labels)? {
        println!("{:>9.2}  {:>9.3}  {:>6.3}", p.threshold, p.precision, p.recall);
    }
    println!("AP = {:.4}", average_precision(&scores, &labels)?);
    let s = thresholded_stats(&scores, &labels, 0.5);
    println!("at 0.5: F1 {:.3}, accuracy {:.3}, precision {:.3}, recall {:.3}", s.f1, s.accuracy, s.precision, s.recall);

    // No positives: AP is undefined rather than zero.
    match average_precision(&[0.3, 0.6], &[false, false]) {
        Err(e) => println!("all-negative input: {e}"),
        Ok(ap) => println!("unexpected AP {ap}"),
    }
    Ok(())
}
