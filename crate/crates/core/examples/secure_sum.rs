//! Five parties add their vectors through additive secret sharing. Prints
//! the recovered sum next to the plaintext one and checks the transcript.

use fetsim::mpc::{secure_sum_plaintexts, transcript_leakage_check, FixedPointVector, DEFAULT_FRAC_BITS};

fn main() -> fetsim::Result<()> {
    let inputs: Vec<Vec<f64>> = (0..5)
        .map(|p| (0..6).map(|c| (p as f64 - 2.0) * 0.75 + c as f64 * 0.1).collect())
        .collect();
    let views: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let out = secure_sum_plaintexts(&views, DEFAULT_FRAC_BITS, 42, 0, true)?;

    let plain: Vec<f64> = (0..6).map(|c| inputs.iter().map(|x| x[c]).sum()).collect();
    println!("plaintext sum: {plain:.6?}");
    println!("secure sum:    {:.6?}", out.result.decode());

    let transcript = out.transcript.expect("recording was requested");
    println!("{} messages, {} bytes on the wire", transcript.messages.len(), transcript.total_bytes());
    let encoded: Vec<FixedPointVector> = inputs
        .iter()
        .map(|x| FixedPointVector::encode(x, DEFAULT_FRAC_BITS))
        .collect::<fetsim::Result<_>>()?;
    let report = transcript_leakage_check(&transcript, &encoded, 1e-3);
    println!("leakage check passed: {}", report.passed());
    Ok(())
}
