//! Classification metrics, ROC curves and AUROC on a toy score list.
//!
//! ```bash
//! cargo run --release --example metrics_roc
//! ```

use jigsaw_ssl::metrics::{auroc, classification_metrics, confusion, roc_csv, roc_curve, trapezoid_area};

fn main() -> jigsaw_ssl::Result<()> {
    let scores = [0.95, 0.9, 0.8, 0.7, 0.7, 0.55, 0.4, 0.3, 0.2, 0.1];
    let labels = [1, 1, 0, 1, 0, 1, 0, 0, 1, 0];

    let preds: Vec<u8> = scores.iter().map(|&s| u8::from(s >= 0.5)).collect();
    let report = classification_metrics(confusion(&preds, &labels)?)?.with_scores(&scores, &labels)?;
    println!("acc / F1 / sens / spec / prec: {}", report.table_row());

    let roc = roc_curve(&scores, &labels)?;
    print!("{}", roc_csv(&roc));
    // Ties between a positive and a negative score earn half credit.
    println!("AUROC rank statistic {:.4}", auroc(&scores, &labels)?);
    println!("AUROC trapezoid      {:.4}", trapezoid_area(&roc));
    Ok(())
}
