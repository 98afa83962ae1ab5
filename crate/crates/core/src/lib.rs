pub mod corpus;
pub mod driver;
pub mod evaluation;
pub mod index;
pub mod localizer;
pub mod numerics;
pub mod ranking;
pub mod retriever;
