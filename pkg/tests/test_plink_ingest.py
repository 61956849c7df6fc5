"""
PLINK ingest tests - bit-exact decoding, header checks, imputation/filtering, delimited import
"""

import os

import numpy as np
import pytest

from plmmkit.errors import IngestError
from plmmkit.matrix_store import MISSING_SENTINEL, create_matrix, open_matrix
from plmmkit.plink_ingest import (
    BYTE_LOOKUP,
    decode_bed,
    impute_and_filter,
    parse_bim,
    parse_fam,
    process_delimited,
    process_plink,
)
from plmmkit.simulate import write_plink


def _write_bed(path, payload: bytes, mode: int = 0x01):
    with open(path, 'wb') as f:
        f.write(bytes([0x6C, 0x1B, mode]) + payload)


def test_round_trip_bit_exact(tmp_path):
    """Test 1: Encoder/decoder round trip over 200 random matrices, every n mod 4, with missing calls"""
    rng = np.random.default_rng(11)
    for trial in range(200):
        n = 1 + trial % 17
        p = 1 + trial % 5
        dosages = rng.integers(0, 3, size=(n, p)).astype(np.uint8)
        dosages[rng.random((n, p)) < 0.2] = MISSING_SENTINEL
        prefix = str(tmp_path / f"t{trial}")
        bed, _, _ = write_plink(dosages, prefix)

        out = create_matrix(prefix + "_dosage.bk", n, p, "uint8")
        report = decode_bed(bed, n, p, out, block_width=2)
        np.testing.assert_array_equal(out.read_raw_block(0, p), dosages)
        assert report.n_missing == int((dosages == MISSING_SENTINEL).sum())


def test_known_byte_layout(tmp_path):
    """Test 2: Samples are packed low bits first with 00=2, 01=missing, 10=1, 11=0"""
    # samples 0..2 -> codes 11, 10, 00 ; padding sample -> 00
    bed = str(tmp_path / "k.bed")
    _write_bed(bed, bytes([0b00_00_10_11]))
    out = create_matrix(str(tmp_path / "k.bk"), 3, 1, "uint8")
    decode_bed(bed, 3, 1, out)
    np.testing.assert_array_equal(out.read_raw_block(0, 1).ravel(), [0, 1, 2])

    _write_bed(bed, bytes([0b00_00_01_11]))
    out = create_matrix(str(tmp_path / "k.bk"), 3, 1, "uint8", overwrite=True)
    decode_bed(bed, 3, 1, out)
    np.testing.assert_array_equal(out.read_raw_block(0, 1).ravel(), [0, MISSING_SENTINEL, 2])

    np.testing.assert_array_equal(BYTE_LOOKUP[0b11_10_01_00], [2, MISSING_SENTINEL, 1, 0])


def test_bed_header_and_length_checks(tmp_path):
    """Test 3: Bad magic, sample-major mode and wrong length are rejected"""
    out = create_matrix(str(tmp_path / "x.bk"), 4, 2, "uint8")
    bed = str(tmp_path / "x.bed")

    with open(bed, 'wb') as f:
        f.write(bytes([0x00, 0x1B, 0x01, 0, 0]))
    with pytest.raises(IngestError, match="magic"):
        decode_bed(bed, 4, 2, out)

    _write_bed(bed, bytes([0, 0]), mode=0x00)
    with pytest.raises(IngestError, match="sample-major"):
        decode_bed(bed, 4, 2, out)

    _write_bed(bed, bytes([0, 0, 0]))
    with pytest.raises(IngestError, match="expected 5"):
        decode_bed(bed, 4, 2, out)


def test_parse_fam_and_bim(tmp_path):
    """Test 4: Text parsing keeps ids as text and reports the offending line"""
    fam = tmp_path / "a.fam"
    fam.write_text("F1 S1 0 0 1 -9\nF2 S2 0 0 2 1.5\n")
    table = parse_fam(str(fam))
    assert table["iid"].tolist() == ["S1", "S2"]
    assert table["phenotype_raw"].tolist() == ["-9", "1.5"]

    fam.write_text("F1 S1 0 0 1 -9\nF2 S2 0 0\n")
    with pytest.raises(IngestError, match="line 2"):
        parse_fam(str(fam))

    bim = tmp_path / "a.bim"
    bim.write_text("1\trs1\t0\t100\tA\tG\n1\trs2\t0.5\t200\tC\tT\n")
    variants = parse_bim(str(bim))
    assert variants["bp_position"].tolist() == [100, 200]
    assert variants["genetic_dist"].tolist() == [0.0, 0.5]

    bim.write_text("1\trs1\t0\t100\tA\tG\n1\trs1\t0\t200\tC\tT\n")
    with pytest.raises(IngestError, match="rs1"):
        parse_bim(str(bim))

    bim.write_text("")
    with pytest.raises(IngestError, match="empty"):
        parse_bim(str(bim))


def test_impute_and_filter(tmp_path):
    """Test 5: Constant, all-missing and rare variants are dropped; missing calls get the column mean"""
    dosages = np.array([
        [1, 0, 0, 0, MISSING_SENTINEL],
        [1, 1, 0, 1, MISSING_SENTINEL],
        [1, 2, 0, 0, MISSING_SENTINEL],
        [1, 1, 0, 1, MISSING_SENTINEL],
        [1, 0, 0, 0, MISSING_SENTINEL],
        [1, 1, 0, 1, MISSING_SENTINEL],
        [1, 2, 0, 0, MISSING_SENTINEL],
        [1, MISSING_SENTINEL, 2, 1, MISSING_SENTINEL],
    ], dtype=np.uint8)
    m = create_matrix(str(tmp_path / "d.bk"), 8, 5, "uint8", col_names=["v1", "v2", "v3", "v4", "v5"])
    m.write_col_block(0, dosages)

    out, report = impute_and_filter(m, maf_min=0.2)
    assert out.col_names == ["v2", "v4"]
    assert report.n_variants_dropped_constant == 2
    assert report.n_variants_dropped_maf == 1
    assert report.n_variants_retained == 2
    assert set(report.dropped_variants) == {"v1", "v3", "v5"}
    assert report.n_missing_imputed == 1

    X = out.read_col_block(0, 2)
    assert X[7, 0] == pytest.approx(1.0)
    np.testing.assert_array_equal(X[:7, 0], dosages[:7, 1])
    assert report.maf[1] == pytest.approx(0.5)
    assert report.maf[2] == pytest.approx(0.125)


def test_all_variants_dropped(tmp_path):
    """Test 6: Filtering away every variant is an error"""
    m = create_matrix(str(tmp_path / "d.bk"), 3, 2, "uint8")
    m.write_col_block(0, np.ones((3, 2), dtype=np.uint8))
    with pytest.raises(IngestError, match="All 2 variants"):
        impute_and_filter(m)


def test_process_plink(plink_triplet, tmp_path):
    """Test 7: Full triplet pipeline writes the store, tables and report"""
    out_dir = str(tmp_path / "work")
    matrix, report, samples, variants = process_plink(plink_triplet["prefix"], out_dir, name="geno")

    assert matrix.n_rows == 40
    assert matrix.row_ids == plink_triplet["ids"]
    assert matrix.n_cols == report.n_variants_retained == len(variants)
    assert report.n_missing == 2
    assert not np.isnan(matrix.read_col_block(0, matrix.n_cols)).any()
    for suffix in ("_variants.txt", "_samples.txt", "_report.json"):
        assert os.path.exists(os.path.join(out_dir, f"geno{suffix}"))
    assert not os.path.exists(os.path.join(out_dir, "geno_dosage.bk"))

    reopened = open_matrix(os.path.join(out_dir, "geno.bk"))
    assert reopened.col_names == variants["variant_id"].tolist()


def test_process_plink_missing_file(plink_triplet, tmp_path):
    """Test 8: A missing member of the triplet is named in the error"""
    os.remove(plink_triplet["prefix"] + ".bim")
    with pytest.raises(IngestError, match=r"\.bim"):
        process_plink(plink_triplet["prefix"], str(tmp_path / "work"))


def test_process_delimited(tmp_path):
    """Test 9: Delimited text with a header and an id column"""
    path = tmp_path / "x.csv"
    path.write_text("id,a,b\ns1,1,2.5\ns2,-3,4e-1\ns3,0,0\n")
    m, names = process_delimited(str(path), id_col="id", chunksize=2)
    assert names == ["a", "b"]
    assert m.row_ids == ["s1", "s2", "s3"]
    np.testing.assert_array_equal(m.read_col_block(0, 2), [[1, 2.5], [-3, 0.4], [0, 0]])

    ws = tmp_path / "y.txt"
    ws.write_text("1 2\n3   4\n")
    m, names = process_delimited(str(ws), delimiter=None, has_header=False)
    assert names == ["V1", "V2"]
    np.testing.assert_array_equal(m.read_col_block(0, 2), [[1, 2], [3, 4]])


def test_process_delimited_errors(tmp_path):
    """Test 10: Non-numeric cells and short rows report their line"""
    bad = tmp_path / "bad.csv"
    bad.write_text("id,a,b\ns1,1,2\ns2,x,3\n")
    with pytest.raises(IngestError, match="line 3"):
        process_delimited(str(bad), id_col="id")

    short = tmp_path / "short.csv"
    short.write_text("a,b,c\n1,2,3\n4,5\n")
    with pytest.raises(IngestError, match="line 3"):
        process_delimited(str(short))
