//! Price ingestion and log-return transformation.
//!
//! Prices come from a UTF-8 CSV file with a header row. The default schema
//! reads an ISO-8601 `date` column and a decimal `close` column; any other
//! columns are ignored. Closing prices are taken as supplied, so whether they
//! are dividend-adjusted is up to the caller.

use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};

const DATE_FORMAT: &str = "%Y-%m-%d";

/// Column names used to pull dates and prices out of a CSV file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub date_column: String,
    pub price_column: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            date_column: "date".to_string(),
            price_column: "close".to_string(),
        }
    }
}

/// Strictly increasing dates paired with positive prices, at least two rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    dates: Vec<NaiveDate>,
    prices: Vec<f64>,
}

impl PriceSeries {
    /// Sorts by date and validates. Duplicate dates are an error.
    pub fn new(rows: Vec<(NaiveDate, f64)>) -> Result<Self> {
        let mut rows = rows;
        if rows.len() < 2 {
            return Err(Error::TooShort {
                required: 2,
                actual: rows.len(),
            });
        }
        for (i, &(_, p)) in rows.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::NonNumericPrice {
                    row: i + 1,
                    value: p.to_string(),
                });
            }
            if p <= 0.0 {
                return Err(Error::NonPositivePrice {
                    row: i + 1,
                    value: p,
                });
            }
        }
        rows.sort_by_key(|&(d, _)| d);
        if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::DuplicateDate(w[0].0));
        }
        let (dates, prices) = rows.into_iter().unzip();
        Ok(Self { dates, prices })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    /// Writes the series back out in the default `date,close` schema.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["date", "close"])?;
        for (d, p) in self.dates.iter().zip(&self.prices) {
            w.write_record([d.format(DATE_FORMAT).to_string(), format!("{p}")])?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Log returns; `dates[k]` is the date of the price that closes return `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    dates: Vec<NaiveDate>,
    values: Vec<f64>,
}

impl ReturnSeries {
    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Reads a price CSV from disk.
pub fn load_prices(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<PriceSeries> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_prices(&text, schema)
}

/// Parses CSV text already in memory.
pub fn parse_prices(text: &str, schema: &CsvSchema) -> Result<PriceSeries> {
    // The csv reader silently skips empty lines; blank rows must fail instead.
    let body = text.trim_end_matches(['\n', '\r']);
    if let Some(line) = body.lines().position(|l| l.trim().is_empty()) {
        return Err(Error::BlankField { row: line });
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let headers = reader.headers()?.clone();
    let date_idx = headers
        .iter()
        .position(|h| h == schema.date_column)
        .ok_or(Error::MissingColumn("date"))?;
    let price_idx = headers
        .iter()
        .position(|h| h == schema.price_column)
        .ok_or(Error::MissingColumn("close"))?;

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let date_raw = record.get(date_idx).unwrap_or("");
        let price_raw = record.get(price_idx).unwrap_or("");
        if date_raw.is_empty() || price_raw.is_empty() {
            return Err(Error::BlankField { row });
        }
        let date =
            NaiveDate::parse_from_str(date_raw, DATE_FORMAT).map_err(|_| Error::BadDate {
                row,
                value: date_raw.to_string(),
            })?;
        let price: f64 = price_raw.parse().map_err(|_| Error::NonNumericPrice {
            row,
            value: price_raw.to_string(),
        })?;
        if !price.is_finite() {
            return Err(Error::NonNumericPrice {
                row,
                value: price_raw.to_string(),
            });
        }
        if price <= 0.0 {
            return Err(Error::NonPositivePrice { row, value: price });
        }
        rows.push((date, price));
    }
    PriceSeries::new(rows)
}

/// `r[k] = ln(p[k+1]) - ln(p[k])`.
pub fn to_log_returns(prices: &PriceSeries) -> ReturnSeries {
    let values = prices
        .prices
        .windows(2)
        .map(|w| w[1].ln() - w[0].ln())
        .collect();
    ReturnSeries {
        dates: prices.dates[1..].to_vec(),
        values,
    }
}

/// Integrates log returns back into a price path starting at `start_price`.
pub fn prices_from_returns(start_price: f64, returns: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(returns.len() + 1);
    let mut log_level = 0.0;
    out.push(start_price);
    for &r in returns {
        log_level += r;
        out.push(start_price * log_level.exp());
    }
    out
}
