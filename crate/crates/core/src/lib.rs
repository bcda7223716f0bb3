pub mod agent;
pub mod audio;
pub mod mixer;
pub mod plan;
pub mod reply;
pub mod serve;
pub mod experts;
pub mod gateway;
pub mod stage1;
pub mod tools;
pub mod tot;
pub mod pipeline;

#[cfg(test)]
mod test_support;
