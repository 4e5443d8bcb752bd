//! Template captions for synthetic samples.

use rand::Rng;

use super::pose::{HandType, SyntheticHandPose};

/// `{the_hand}`, `{hand}` and `{object}` are substituted per sample.
pub const TEMPLATES: &[&str] = &[
    "a person holding a {object} with {the_hand}",
    "a {hand} holding a {object}",
    "someone grabbing a {object} using {the_hand}",
    "a close up photo of a {hand}",
    "a person waving {the_hand}",
    "a {hand} pointing at a {object}",
    "a person taking a {object} with {the_hand}",
    "a {hand} reaching for a {object}",
    "a person using a {object}",
    "an open {hand} on a dark background",
    "a person showing the palm of {the_hand}",
    "fingers gripping a {object}",
];

pub const OBJECTS: &[&str] = &[
    "phone", "cup", "pen", "ball", "apple", "book", "key", "remote", "bottle", "brush",
];

fn hand_words(hand: HandType) -> (&'static str, &'static str) {
    match hand {
        HandType::Left => ("the left hand", "left hand"),
        HandType::Right => ("the right hand", "right hand"),
        HandType::Both => ("both hands", "pair of hands"),
    }
}

/// Fill template `index` for the given hand type and object.
pub fn fill_template(index: usize, hand: HandType, object: &str) -> String {
    let (the_hand, hand_noun) = hand_words(hand);
    TEMPLATES[index]
        .replace("{the_hand}", the_hand)
        .replace("{hand}", hand_noun)
        .replace("{object}", object)
}

/// Draw a caption for `pose` from the template bank.
pub fn make_prompt<R: Rng>(pose: &SyntheticHandPose, rng: &mut R) -> String {
    let t = rng.random_range(0..TEMPLATES.len());
    let o = rng.random_range(0..OBJECTS.len());
    fill_template(t, pose.hand_type, OBJECTS[o])
}
