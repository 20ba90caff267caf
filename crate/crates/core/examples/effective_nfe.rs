//! Effective NFE under ideal quadratic cost scaling and under a measured
//! latency profile.

use ladderdiff::metrics::{effective_nfe, ideal_quadratic_costs, StageCost};

fn main() -> ladderdiff::Result<()> {
    // NFEs are listed full resolution first
    let ideal = effective_nfe(&ideal_quadratic_costs(&[17, 13, 18], 32, 1.0), 1)?;
    println!("ideal eta, 18/13/17 from lowest to highest: effective NFE {}", ideal.effective_nfe);
    for e in &ideal.eta {
        println!("  stage {}: eta {:.4} -> {} full-resolution calls", e.stage, e.eta, e.scaled_nfe);
    }

    let measured = [
        StageCost { stage: 1, resolution: 32, nfe: 17, latency_s: 0.0590 },
        StageCost { stage: 2, resolution: 16, nfe: 13, latency_s: 0.0216 },
        StageCost { stage: 3, resolution: 8, nfe: 18, latency_s: 0.0077 },
    ];
    let report = effective_nfe(&measured, 1)?;
    println!("measured latencies: effective NFE {}", report.effective_nfe);
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(())
}
