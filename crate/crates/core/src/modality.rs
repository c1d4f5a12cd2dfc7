//! Modalities and the eight query→candidate task types.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
    ImageText,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Image, Modality::ImageText];

    /// Single-byte code used by the index file format.
    pub fn code(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Image => 1,
            Modality::ImageText => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::ImageText => "image_text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Query→candidate retrieval task, named by input and output modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskType {
    #[serde(rename = "t2i")]
    TextToImage,
    #[serde(rename = "t2t")]
    TextToText,
    #[serde(rename = "i2t")]
    ImageToText,
    #[serde(rename = "i2i")]
    ImageToImage,
    #[serde(rename = "t2it")]
    TextToImageText,
    #[serde(rename = "it2t")]
    ImageTextToText,
    #[serde(rename = "it2i")]
    ImageTextToImage,
    #[serde(rename = "it2it")]
    ImageTextToImageText,
}

impl TaskType {
    pub const ALL: [TaskType; 8] = [
        TaskType::TextToImage,
        TaskType::TextToText,
        TaskType::ImageToText,
        TaskType::ImageToImage,
        TaskType::TextToImageText,
        TaskType::ImageTextToText,
        TaskType::ImageTextToImage,
        TaskType::ImageTextToImageText,
    ];

    pub fn query_modality(self) -> Modality {
        use TaskType::*;
        match self {
            TextToImage | TextToText | TextToImageText => Modality::Text,
            ImageToText | ImageToImage => Modality::Image,
            ImageTextToText | ImageTextToImage | ImageTextToImageText => Modality::ImageText,
        }
    }

    pub fn target_modality(self) -> Modality {
        use TaskType::*;
        match self {
            TextToText | ImageToText | ImageTextToText => Modality::Text,
            TextToImage | ImageToImage | ImageTextToImage => Modality::Image,
            TextToImageText | ImageTextToImageText => Modality::ImageText,
        }
    }

    /// Position in [`TaskType::ALL`]; doubles as the dataset code.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).expect("listed")
    }

    pub fn code(self) -> &'static str {
        use TaskType::*;
        match self {
            TextToImage => "t2i",
            TextToText => "t2t",
            ImageToText => "i2t",
            ImageToImage => "i2i",
            TextToImageText => "t2it",
            ImageTextToText => "it2t",
            ImageTextToImage => "it2i",
            ImageTextToImageText => "it2it",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for TaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.code() == s)
            .ok_or_else(|| Error::Lookup(format!("unknown task type {s:?}")))
    }
}
