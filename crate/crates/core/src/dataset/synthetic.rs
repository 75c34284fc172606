//! Seeded encyclopedia-style text for offline runs and tests.
//!
//! Articles describe invented people, places, and works with templated
//! sentences. The vocabulary is small enough for a toy tokenizer and the
//! entity slots vary enough that chunks rarely repeat.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FIRST: &[&str] = &[
    "Anna", "Boris", "Clara", "David", "Elena", "Felix", "Greta", "Hugo", "Irene", "Jonas",
    "Karin", "Louis", "Marta", "Nils", "Olga", "Pavel", "Rosa", "Simon", "Tomas", "Vera", "Walter",
    "Yusuf", "Zofia", "Ines",
];
const LAST: &[&str] = &[
    "Berger", "Castell", "Dorn", "Engel", "Falk", "Graf", "Hahn", "Iversen", "Jansen", "Keller",
    "Lind", "Moreau", "Novak", "Ortiz", "Petrov", "Quint", "Rossi", "Sato", "Torres", "Ulrich",
    "Varga", "Weiss",
];
const PROFESSION: &[&str] = &[
    "painter",
    "composer",
    "physicist",
    "novelist",
    "architect",
    "botanist",
    "historian",
    "poet",
    "engineer",
    "chemist",
    "sculptor",
    "astronomer",
    "diplomat",
    "economist",
    "geologist",
    "linguist",
];
const NATION: &[&str] = &[
    "French",
    "German",
    "Italian",
    "Spanish",
    "Polish",
    "Dutch",
    "Swedish",
    "Greek",
    "Czech",
    "Danish",
    "Austrian",
    "Belgian",
    "Irish",
    "Finnish",
    "Hungarian",
    "Portuguese",
];
const CITY: &[&str] = &[
    "Lyon", "Bremen", "Verona", "Toledo", "Krakow", "Utrecht", "Uppsala", "Patras", "Brno",
    "Aarhus", "Graz", "Ghent", "Cork", "Turku", "Szeged", "Porto", "Nantes", "Leipzig", "Parma",
    "Bilbao",
];
const REGION: &[&str] = &[
    "northern", "southern", "eastern", "western", "central", "coastal", "alpine", "rural",
];
const FIELD: &[&str] = &[
    "optics",
    "folk music",
    "river ecology",
    "medieval trade",
    "glass design",
    "crystal growth",
    "urban planning",
    "early printing",
    "tidal energy",
    "plant genetics",
    "railway history",
    "sea charts",
];
const WORK: &[&str] = &[
    "The Silent Harbor",
    "Winter Letters",
    "A Map of Rivers",
    "The Glass Garden",
    "Northern Lights",
    "The Last Orchard",
    "Songs of Stone",
    "The Copper Bell",
    "Evening Tides",
    "The Iron Bridge",
];
const INSTITUTION: &[&str] = &[
    "the national academy",
    "a small museum",
    "the city university",
    "a royal society",
    "the state library",
    "a technical college",
    "the public observatory",
];
const BUILDING: &[&str] = &[
    "cathedral",
    "town hall",
    "harbor",
    "old bridge",
    "botanical garden",
    "castle",
    "market square",
];
const INDUSTRY: &[&str] = &[
    "textiles",
    "shipbuilding",
    "wine",
    "tourism",
    "printing",
    "steel",
    "fishing",
    "porcelain",
];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty table")
}

fn person(rng: &mut ChaCha8Rng) -> String {
    let first = pick(rng, FIRST);
    let last = pick(rng, LAST);
    let nation = pick(rng, NATION);
    let prof = pick(rng, PROFESSION);
    let city = pick(rng, CITY);
    let born = rng.gen_range(1720..1960);
    let died = born + rng.gen_range(35..90);
    let field = pick(rng, FIELD);
    let work = pick(rng, WORK);
    let inst = pick(rng, INSTITUTION);
    let mut s = vec![
        format!("{first} {last} ({born} - {died}) was a {nation} {prof} born in {city}."),
        format!("{last} studied {field} and later joined {inst}."),
        format!(
            "In {} {last} published {work}, which received wide attention.",
            born + rng.gen_range(20..34)
        ),
        format!(
            "{last} spent most of {} later life in {}.",
            ["his", "her"][rng.gen_range(0..2)],
            pick(rng, CITY)
        ),
        format!("The work of {first} {last} influenced several {prof}s of the next generation."),
    ];
    s[1..].shuffle(rng);
    s.truncate(rng.gen_range(3..=5));
    s.join(" ")
}

fn place(rng: &mut ChaCha8Rng) -> String {
    let city = pick(rng, CITY);
    let region = pick(rng, REGION);
    let nation = pick(rng, NATION);
    let pop = rng.gen_range(12..900) * 1000;
    let year = rng.gen_range(900..1500);
    let building = pick(rng, BUILDING);
    let industry = pick(rng, INDUSTRY);
    let mut s = vec![
        format!("{city} is a city in the {region} part of the {nation} lands."),
        format!("It has a population of about {pop} people."),
        format!("The town was first mentioned in {year} as a river crossing."),
        format!("Its {building} is the best known landmark of the old town."),
        format!("The local economy was long based on {industry}."),
        format!(
            "{city} hosts {} founded in {}.",
            pick(rng, INSTITUTION),
            year + rng.gen_range(200..500)
        ),
    ];
    s[1..].shuffle(rng);
    s.truncate(rng.gen_range(3..=6));
    s.join(" ")
}

fn work(rng: &mut ChaCha8Rng) -> String {
    let title = pick(rng, WORK);
    let first = pick(rng, FIRST);
    let last = pick(rng, LAST);
    let year = rng.gen_range(1780..2000);
    let city = pick(rng, CITY);
    let field = pick(rng, FIELD);
    let mut s = vec![
        format!("{title} is a {year} book by {first} {last}."),
        format!("The story is set in {city} during a cold winter."),
        format!(
            "It was first printed in {city} and translated into {} languages.",
            rng.gen_range(2..30)
        ),
        format!("Critics praised its treatment of {field}."),
        format!(
            "A second edition appeared in {}.",
            year + rng.gen_range(1..40)
        ),
    ];
    s[1..].shuffle(rng);
    s.truncate(rng.gen_range(3..=5));
    s.join(" ")
}

/// `articles` paragraphs, one per line.
pub fn encyclopedia(seed: u64, articles: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..articles)
        .map(|_| match rng.gen_range(0..3) {
            0 => person(&mut rng),
            1 => place(&mut rng),
            _ => work(&mut rng),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_varied() {
        let a = encyclopedia(3, 50);
        assert_eq!(a, encyclopedia(3, 50));
        assert_ne!(a, encyclopedia(4, 50));
        let distinct: std::collections::HashSet<_> = a.iter().collect();
        assert_eq!(distinct.len(), 50);
        assert!(a.iter().all(|p| !p.contains('\n') && p.ends_with('.')));
    }
}
