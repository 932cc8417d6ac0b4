use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleId {
    TestGenerator,
    BugFixer,
    Refiner,
}

impl RoleId {
    pub const ALL: [RoleId; 3] = [Self::TestGenerator, Self::BugFixer, Self::Refiner];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TestGenerator => "test_generator",
            Self::BugFixer => "bug_fixer",
            Self::Refiner => "refiner",
        }
    }

    /// Slots the role's user template must receive.
    pub fn required_slots(self) -> &'static [&'static str] {
        match self {
            Self::TestGenerator => &["function"],
            Self::BugFixer => &["function", "unit_test", "execution_result"],
            Self::Refiner => &["function", "unit_test"],
        }
    }

    pub fn default_system_prompt(self) -> &'static str {
        match self {
            Self::TestGenerator => include_str!("../../templates/test_generator.system.txt"),
            Self::BugFixer => include_str!("../../templates/bug_fixer.system.txt"),
            Self::Refiner => include_str!("../../templates/refiner.system.txt"),
        }
    }

    pub fn default_user_template(self) -> &'static str {
        match self {
            Self::TestGenerator => include_str!("../../templates/test_generator.user.txt"),
            Self::BugFixer => include_str!("../../templates/bug_fixer.user.txt"),
            Self::Refiner => include_str!("../../templates/refiner.user.txt"),
        }
    }
}

impl fmt::Display for RoleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RoleId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown role `{s}`"))
    }
}

pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_MAX_TOKENS: u32 = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderBinding {
    pub provider_id: String,
    pub model: String,
}

/// One agent role: its prompts, the provider it is bound to and its
/// sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRole {
    pub role_id: RoleId,
    pub system_prompt: String,
    pub user_template: String,
    pub provider: ProviderBinding,
    pub sampling: Sampling,
}

impl AgentRole {
    /// Role with the shipped prompts.
    pub fn with_defaults(role_id: RoleId, provider: ProviderBinding) -> Self {
        Self {
            role_id,
            system_prompt: role_id.default_system_prompt().to_string(),
            user_template: role_id.default_user_template().to_string(),
            provider,
            sampling: Sampling::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

impl RenderedPrompt {
    pub fn full_text(&self) -> String {
        format!("{}\n\n{}", self.system, self.user)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("missing slot `{slot}` for role {role}")]
    MissingSlot { role: RoleId, slot: String },
}

/// `{name}` placeholders in order of appearance. Braces that do not enclose
/// a lowercase identifier are literal text.
fn placeholders(template: &str) -> Vec<(usize, usize, &str)> {
    let bytes = template.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let name_len = bytes[i + 1..]
                .iter()
                .take_while(|b| b.is_ascii_lowercase() || **b == b'_')
                .count();
            let close = i + 1 + name_len;
            if name_len > 0 && bytes.get(close) == Some(&b'}') {
                out.push((i, close + 1, &template[i + 1..close]));
                i = close + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Substitute `slots` into the role's user template in a single pass; slot
/// values are never rescanned for placeholders.
pub fn render_prompt(role: &AgentRole, slots: &BTreeMap<&str, &str>) -> Result<RenderedPrompt, TemplateError> {
    let missing = |slot: &str| TemplateError::MissingSlot {
        role: role.role_id,
        slot: slot.to_string(),
    };
    if let Some(slot) = role.role_id.required_slots().iter().find(|s| !slots.contains_key(**s)) {
        return Err(missing(slot));
    }
    let template = role.user_template.as_str();
    let mut user = String::with_capacity(template.len() + slots.values().map(|v| v.len()).sum::<usize>());
    let mut cursor = 0;
    for (start, end, name) in placeholders(template) {
        let value = slots.get(name).ok_or_else(|| missing(name))?;
        user.push_str(&template[cursor..start]);
        user.push_str(value);
        cursor = end;
    }
    user.push_str(&template[cursor..]);
    Ok(RenderedPrompt {
        system: role.system_prompt.clone(),
        user,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn role(id: RoleId) -> AgentRole {
        AgentRole::with_defaults(
            id,
            ProviderBinding {
                provider_id: "mock".into(),
                model: "m".into(),
            },
        )
    }

    #[test]
    fn test_generator_embeds_function_and_guidelines() {
        let slots = BTreeMap::from([("function", "def f(): return 1")]);
        let p = render_prompt(&role(RoleId::TestGenerator), &slots).unwrap();
        assert!(p.user.contains("def f(): return 1"));
        let full = p.full_text();
        assert!(full.contains("Please follow these guidelines:"));
        assert!(full.contains("Do not modify the class name(TestCases)."));
    }

    #[test]
    fn bug_fixer_requires_execution_result() {
        let slots = BTreeMap::from([("function", "def f(): pass"), ("unit_test", "...")]);
        let err = render_prompt(&role(RoleId::BugFixer), &slots).unwrap_err();
        assert_eq!(
            err,
            TemplateError::MissingSlot {
                role: RoleId::BugFixer,
                slot: "execution_result".into()
            }
        );
    }

    #[test]
    fn slot_values_are_not_rescanned() {
        let slots = BTreeMap::from([("function", "print(f'{unit_test}')")]);
        let p = render_prompt(&role(RoleId::TestGenerator), &slots).unwrap();
        assert!(p.user.contains("print(f'{unit_test}')"));
    }

    #[test]
    fn unknown_placeholder_in_custom_template_errors() {
        let mut r = role(RoleId::TestGenerator);
        r.user_template = "{function} and {extra} and {Not a slot}".into();
        let slots = BTreeMap::from([("function", "x")]);
        assert!(render_prompt(&r, &slots).is_err());
        let slots = BTreeMap::from([("function", "x"), ("extra", "y")]);
        assert_eq!(render_prompt(&r, &slots).unwrap().user, "x and y and {Not a slot}");
    }

    #[test]
    fn system_prompts_are_shipped_verbatim() {
        let gen = RoleId::TestGenerator.default_system_prompt();
        assert!(gen.starts_with("You are a professional software testing expert."));
        assert!(gen.ends_with("Do not modify the class name(TestCases)."));
        let fix = RoleId::BugFixer.default_system_prompt();
        assert!(fix.contains("Only output the fixed code within Python code blocks"));
        let refine = RoleId::Refiner.default_system_prompt();
        assert!(refine.starts_with(
            "You are a powerful coding expert specialized in code documentation and optimization. \n"
        ));
        assert!(refine.contains("Keep function names unchanged"));
    }

    proptest! {
        #[test]
        fn rendering_is_injective_per_slot(a in "\\PC{0,40}", b in "\\PC{0,40}", other in "\\PC{0,10}") {
            prop_assume!(a != b);
            for id in RoleId::ALL {
                let r = role(id);
                let mut slots: BTreeMap<&str, &str> = id.required_slots().iter().map(|s| (*s, other.as_str())).collect();
                for slot in id.required_slots() {
                    slots.insert(slot, &a);
                    let pa = render_prompt(&r, &slots).unwrap();
                    slots.insert(slot, &b);
                    let pb = render_prompt(&r, &slots).unwrap();
                    slots.insert(slot, &other);
                    prop_assert_ne!(pa, pb);
                }
            }
        }
    }
}
