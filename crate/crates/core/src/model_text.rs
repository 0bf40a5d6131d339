//! Command-line spellings of loss and noise models: a bare name with default
//! parameters, or an inline TOML table such as `{ name = "gaussian", sd = 2.0 }`.

use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Deserialize)]
struct Wrapper<T> {
    v: T,
}

pub(crate) fn parse_model<T: DeserializeOwned>(
    kind: &'static str,
    text: &str,
    by_name: impl Fn(&str) -> Option<T>,
) -> Result<T> {
    let text = text.trim();
    if text.starts_with('{') {
        return toml::from_str::<Wrapper<T>>(&format!("v = {text}"))
            .map(|w| w.v)
            .map_err(|e| Error::InvalidArgument(format!("{kind} `{text}`: {}", e.message())));
    }
    by_name(text).ok_or_else(|| Error::UnknownModel {
        kind,
        name: text.to_string(),
    })
}
