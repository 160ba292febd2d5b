// SPDX-License-Identifier: Apache-2.0

//! Holds the `acceptance` test target, which prints one PASS/FAIL line per
//! criterion. Run it with `cargo test -p aoi-validation --test acceptance`.
