use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{validate_profile, AttributeCatalog, ProfileError, StudentProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RenderingVersion {
    #[serde(rename = "v1")]
    V1,
}

impl RenderingVersion {
    pub fn as_str(self) -> &'static str {
        match self {
            RenderingVersion::V1 => "v1",
        }
    }
}

impl std::str::FromStr for RenderingVersion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "v1" => Ok(RenderingVersion::V1),
            other => Err(format!("unknown rendering version '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileText {
    pub text: String,
    pub rendering_version: RenderingVersion,
}

/// Render a valid profile to natural-language text. Output is a pure function
/// of `(profile, catalog, version)`; one field per line in a fixed order.
pub fn render_profile(
    profile: &StudentProfile,
    catalog: &AttributeCatalog,
    version: RenderingVersion,
) -> Result<ProfileText, ProfileError> {
    let violations = validate_profile(profile, catalog);
    if !violations.is_empty() {
        return Err(ProfileError::Invalid(violations));
    }
    Ok(ProfileText {
        text: render_unchecked(profile, catalog, version),
        rendering_version: version,
    })
}

pub(super) fn render_unchecked(
    profile: &StudentProfile,
    catalog: &AttributeCatalog,
    version: RenderingVersion,
) -> String {
    match version {
        RenderingVersion::V1 => render_v1(profile, catalog),
    }
}

fn render_v1(p: &StudentProfile, catalog: &AttributeCatalog) -> String {
    let mut out = String::new();
    // Writing to a String cannot fail.
    let _ = writeln!(out, "## Basic Information");
    let _ = writeln!(out, "Gender: {}", p.gender);
    let _ = writeln!(out, "Age: {}", p.age);
    let _ = writeln!(out, "Major: {}", p.major);
    let _ = writeln!(out, "Academic standing: {}", p.standing);

    let _ = writeln!(out, "\n## Personality");
    let _ = writeln!(out, "MBTI: {}", p.mbti);
    for e in &p.big_five {
        let _ = writeln!(
            out,
            "{} ({}): {} - {}",
            e.trait_code.name(),
            e.trait_code.code(),
            e.level,
            e.description
        );
    }

    let _ = writeln!(
        out,
        "\n## Learning Traits (1 = strongly disagree, 5 = strongly agree)"
    );
    for (values, sub) in p.learning_traits.iter().zip(&catalog.learning_traits) {
        for (value, item) in values.iter().zip(&sub.items) {
            let _ = writeln!(out, "[{}] {}: {}", sub.name, item, value);
        }
    }

    let _ = writeln!(out, "\n## Academic Challenges");
    for (answer, item) in p.challenges.iter().zip(&catalog.challenges) {
        let _ = writeln!(out, "{}: {}", item.text, if *answer { "Yes" } else { "No" });
    }

    let _ = writeln!(out, "\n## Motivation");
    let _ = writeln!(out, "{}", p.motivational_notes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::sample_profile;

    #[test]
    fn contains_every_field() {
        let c = AttributeCatalog::default();
        let p = sample_profile(7, &c).unwrap();
        let t = render_profile(&p, &c, RenderingVersion::V1).unwrap().text;
        assert!(t.contains(&format!("MBTI: {}", p.mbti)));
        assert!(t.contains(&p.major));
        let likert_lines = t.lines().filter(|l| l.starts_with('[')).count();
        assert_eq!(likert_lines, 12);
        for (values, sub) in p.learning_traits.iter().zip(&c.learning_traits) {
            for (v, item) in values.iter().zip(&sub.items) {
                assert!(t.contains(&format!("{item}: {v}")));
            }
        }
        for e in &p.big_five {
            assert!(t.contains(&e.description));
        }
        assert!(t.contains(&p.motivational_notes));
    }

    #[test]
    fn byte_identical_on_repeat() {
        let c = AttributeCatalog::default();
        let p = sample_profile(8, &c).unwrap();
        let a = render_profile(&p, &c, RenderingVersion::V1).unwrap();
        let b = render_profile(&p, &c, RenderingVersion::V1).unwrap();
        assert_eq!(a.text.as_bytes(), b.text.as_bytes());
    }

    #[test]
    fn age_change_touches_only_age_line() {
        let c = AttributeCatalog::default();
        let p = sample_profile(9, &c).unwrap();
        let mut q = p.clone();
        q.age = if p.age == 20 { 21 } else { 20 };
        let a = render_profile(&p, &c, RenderingVersion::V1).unwrap().text;
        let b = render_profile(&q, &c, RenderingVersion::V1).unwrap().text;
        let diff: Vec<_> = a
            .lines()
            .zip(b.lines())
            .filter(|(x, y)| x != y)
            .collect();
        assert_eq!(a.lines().count(), b.lines().count());
        assert_eq!(diff.len(), 1);
        assert!(diff[0].0.starts_with("Age: "));
    }

    #[test]
    fn invalid_profile_is_refused() {
        let c = AttributeCatalog::default();
        let mut p = sample_profile(10, &c).unwrap();
        p.learning_traits[1] = vec![1, 3, 5];
        assert!(matches!(
            render_profile(&p, &c, RenderingVersion::V1),
            Err(ProfileError::Invalid(_))
        ));
    }
}
