use proptest::prelude::*;

use pue_core::prompt::{assemble_sample, parse_prompt, render_prompt, split_sample};
use pue_core::{EmotionWeights, Gender, Vocabulary};

fn weights() -> impl Strategy<Value = EmotionWeights> {
    prop::array::uniform5(0u32..=100)
        .prop_filter("at least one nonzero weight", |w| w.iter().any(|&x| x > 0))
        .prop_map(|w| EmotionWeights::new(w).unwrap())
}

fn gender() -> impl Strategy<Value = Gender> {
    prop_oneof![Just(Gender::Man), Just(Gender::Woman)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn parse_inverts_render(w in weights(), g in gender()) {
        let text = render_prompt(&w, g).unwrap();
        prop_assert_eq!(parse_prompt(&text).unwrap(), (w, g));
    }

    #[test]
    fn split_inverts_assemble(
        prompt in prop::collection::vec(0u32..261, 0..40),
        text in prop::collection::vec(0u32..261, 0..20),
        speech in prop::collection::vec(0u32..261, 0..40),
    ) {
        let specials = Vocabulary::default().specials();
        let seq = assemble_sample(&specials, &prompt, &text, &speech).unwrap();
        prop_assert_eq!(seq.len(), prompt.len() + text.len() + speech.len() + 3);
        prop_assert_eq!(split_sample(&specials, &seq).unwrap(), (prompt, text, speech));
    }

    #[test]
    fn special_ids_never_enter_a_segment(
        mut text in prop::collection::vec(0u32..261, 1..20),
        at in any::<prop::sample::Index>(),
        special in 261u32..264,
    ) {
        let specials = Vocabulary::default().specials();
        let i = at.index(text.len());
        text[i] = special;
        prop_assert!(assemble_sample(&specials, &[], &text, &[60]).is_err());
    }
}

#[test]
fn corner_weights_round_trip() {
    for mask in 1u32..32 {
        let w: [u32; 5] = std::array::from_fn(|i| if mask >> i & 1 == 1 { 100 } else { 0 });
        let w = EmotionWeights::new(w).unwrap();
        for g in [Gender::Man, Gender::Woman] {
            assert_eq!(parse_prompt(&render_prompt(&w, g).unwrap()).unwrap(), (w, g));
        }
    }
    assert!(render_prompt(&EmotionWeights::new([0; 5]).unwrap(), Gender::Man).is_err());
}
