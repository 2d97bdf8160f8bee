//! Writes scores in the text format, checks the rendering is stable under a
//! parse/write round trip, and fills a missing trial.
//!
//! `cargo run --example submission_io`

use std::io::Cursor;

use lidkit::submission::{fill_missing, format_score, parse_key, parse_scores, scores_to_string, ScoreRecord};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let key = parse_key(Cursor::new("eng fra spa\nseg1 eng\nseg2 OOS\nseg3 spa\n"))?;
    let records = vec![
        ScoreRecord::new("seg1", vec![2.0 / 3.0, -1.25e-7, 12345.678901]),
        ScoreRecord::new("seg3", vec![-0.5, 0.25, f64::NEG_INFINITY]),
    ];
    let text = scores_to_string(&records);
    print!("{text}");
    let back = parse_scores(Cursor::new(&text), key.languages())?;
    // Rendering rounds to nine significant digits, so the text is the fixed point.
    assert_eq!(scores_to_string(&back), text);
    println!("2/3 was stored as {}", back[0].scores[0]);
    println!("pi renders as {}", format_score(std::f64::consts::PI));

    let filled = fill_missing(back, &key);
    println!("lost {:?}, extra {:?}", filled.lost, filled.extra);
    print!("{}", scores_to_string(&filled.records));

    let err = parse_scores(Cursor::new("seg1 1 2\n"), key.languages()).unwrap_err();
    println!("malformed input: {err}");
    Ok(())
}
