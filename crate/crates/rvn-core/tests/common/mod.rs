pub mod oracle_checks;
