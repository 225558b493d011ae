//! A desk-scale grid testbed.
//!
//! Independent services — compute clusters (gatekeeper + grid manager +
//! local scheduler + per-resource information provider), storage elements,
//! a replica catalog and a hierarchy of caching registries — plus a
//! client-side broker that discovers resources, matches job requirements
//! against them and drives the full job life cycle. All inter-process
//! communication uses one framed text protocol ([`wire`]); all data
//! transfers are strictly peer-to-peer between the client, the clusters
//! and the storage elements.

pub mod broker;
pub mod clock;
pub mod config;
pub mod gm;
pub mod infomodel;
pub mod lrms;
pub mod rc;
pub mod se;
pub mod wire;
pub mod xrsl;
