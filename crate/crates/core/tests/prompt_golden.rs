mod common;

use common::{check_golden, GOLDEN_NAMES};

#[test]
fn rendered_prompts_match_golden_transcriptions() {
    let failures: Vec<String> = GOLDEN_NAMES.iter().filter_map(|n| check_golden(n).err()).collect();
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn every_template_has_a_golden() {
    for t in unhate::prompt::TemplateName::ALL {
        let name = t.file_name().trim_end_matches(".txt");
        assert!(GOLDEN_NAMES.contains(&name), "{name}");
    }
}
