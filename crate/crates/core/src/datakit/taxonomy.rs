//! Land-cover categories and the twelve change classes (background plus
//! eleven from→to transitions).

use serde::{Deserialize, Serialize};

/// Land-cover categories that appear in scenes and in text descriptors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    BareLand,
    Water,
    Road,
    Vegetation,
    Building,
    Farmland,
    Grass,
    Bridge,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::BareLand,
        Category::Water,
        Category::Road,
        Category::Vegetation,
        Category::Building,
        Category::Farmland,
        Category::Grass,
        Category::Bridge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::BareLand => "bare land",
            Category::Water => "water",
            Category::Road => "road",
            Category::Vegetation => "vegetation",
            Category::Building => "building",
            Category::Farmland => "farmland",
            Category::Grass => "grass",
            Category::Bridge => "bridge",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Base RGB colour used by the scene renderer.
    pub fn palette(self) -> [f32; 3] {
        match self {
            Category::BareLand => [181.0, 150.0, 110.0],
            Category::Water => [35.0, 70.0, 130.0],
            Category::Road => [95.0, 95.0, 100.0],
            Category::Vegetation => [30.0, 100.0, 40.0],
            Category::Building => [190.0, 80.0, 70.0],
            Category::Farmland => [170.0, 180.0, 70.0],
            Category::Grass => [110.0, 190.0, 90.0],
            Category::Bridge => [160.0, 160.0, 175.0],
        }
    }

    /// Relative strength of the per-pixel texture noise.
    pub fn texture(self) -> f32 {
        match self {
            Category::Water => 0.5,
            Category::Road | Category::Bridge => 0.7,
            Category::Vegetation | Category::Farmland => 1.3,
            _ => 1.0,
        }
    }
}

/// One entry of the change-class table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionClass {
    pub index: usize,
    pub name: String,
    pub from_category: Option<String>,
    pub to_category: Option<String>,
}

pub const CLASS_COUNT: usize = 12;
pub const BACKGROUND: usize = 0;

/// `(from, to)` for change classes 1..=11, in class-index order.
pub const TRANSITIONS: [(Category, Category); 11] = [
    (Category::BareLand, Category::Road),
    (Category::Water, Category::Bridge),
    (Category::Water, Category::Road),
    (Category::Road, Category::BareLand),
    (Category::Road, Category::Vegetation),
    (Category::Vegetation, Category::Road),
    (Category::Building, Category::Road),
    (Category::Farmland, Category::Road),
    (Category::Grass, Category::Road),
    (Category::Road, Category::Grass),
    (Category::Bridge, Category::Water),
];

/// `(from, to)` categories of a change class; `None` for background.
pub fn transition(class: usize) -> Option<(Category, Category)> {
    (1..CLASS_COUNT).contains(&class).then(|| TRANSITIONS[class - 1])
}

pub fn class_name(class: usize) -> String {
    match transition(class) {
        None => "background".to_owned(),
        Some((a, b)) => format!("{} -> {}", a.name(), b.name()),
    }
}

pub fn class_table() -> Vec<TransitionClass> {
    (0..CLASS_COUNT)
        .map(|i| TransitionClass {
            index: i,
            name: class_name(i),
            from_category: transition(i).map(|(a, _)| a.name().to_owned()),
            to_category: transition(i).map(|(_, b)| b.name().to_owned()),
        })
        .collect()
}

pub fn class_names() -> Vec<String> {
    (0..CLASS_COUNT).map(class_name).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taxonomy_order() {
        let names = class_names();
        assert_eq!(names[0], "background");
        assert_eq!(names[1], "bare land -> road");
        assert_eq!(names[2], "water -> bridge");
        assert_eq!(names[11], "bridge -> water");
        assert_eq!(names.len(), 12);
        let table = class_table();
        assert!(table[0].from_category.is_none());
        assert_eq!(table[7].from_category.as_deref(), Some("building"));
    }

    #[test]
    fn transitions_change_category() {
        assert!(TRANSITIONS.iter().all(|(a, b)| a != b));
    }
}
