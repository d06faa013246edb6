//! JSON Schemas for `--json` output, one per command plus the envelope.

pub const ENVELOPE: &str = include_str!("../schemas/envelope.json");

pub const COMMANDS: [(&str, &str); 7] = [
    ("simulate", include_str!("../schemas/simulate.json")),
    ("calibrate", include_str!("../schemas/calibrate.json")),
    ("transfer", include_str!("../schemas/transfer.json")),
    ("split", include_str!("../schemas/split.json")),
    ("eval-transfer", include_str!("../schemas/eval-transfer.json")),
    ("losses-check", include_str!("../schemas/losses-check.json")),
    ("export-coco", include_str!("../schemas/export-coco.json")),
];

pub fn lookup(command: &str) -> Option<&'static str> {
    match command {
        "envelope" => Some(ENVELOPE),
        _ => COMMANDS.iter().find(|(c, _)| *c == command).map(|(_, s)| *s),
    }
}
