use crate::catalogue::CatalogueError;
use crate::cli::scenario::ScenarioError;
use crate::dataops::DataError;
use crate::membership::MembershipError;
use crate::sim::SimError;

/// Any error surfaced by the public API.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Membership(#[from] MembershipError),
    #[error(transparent)]
    Catalogue(#[from] CatalogueError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
