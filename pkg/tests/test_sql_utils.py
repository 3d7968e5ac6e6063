import pytest

from rewritehub.sql_utils import (canonicalize_sql, mentions_query_details, normalize_text, outer_order_by,
                                  query_identifiers, sql_digest)


def test_canonicalize_collapses_whitespace_and_comments():
    sql = "SELECT  ss_item_sk\n  FROM store_sales -- trailing note\n WHERE ss_item_sk = 'X  Y' ;;"
    assert canonicalize_sql(sql) == "select ss_item_sk from store_sales where ss_item_sk = 'X  Y'"


def test_canonicalize_keeps_literals_and_quoted_identifiers():
    sql = 'select "Store Name" from store where s_state = \'SELECT  --x\''
    assert canonicalize_sql(sql) == 'select "Store Name" from store where s_state = \'SELECT  --x\''


def test_canonicalize_keeps_dollar_quoted_and_escape_strings():
    assert canonicalize_sql('SELECT $$A  B$$') == 'select $$A  B$$'
    assert canonicalize_sql('select $$A  B$$') != canonicalize_sql('select $$A B$$')
    assert canonicalize_sql("SELECT E'x  Y'  FROM t") == "select E'x  Y' from t"


def test_canonicalize_lowercases_multi_word_keywords():
    assert canonicalize_sql('SELECT x FROM t ORDER BY x') == canonicalize_sql('select x from t order by x')
    assert canonicalize_sql('SELECT x FROM t GROUP BY x') == 'select x from t group by x'


@pytest.mark.parametrize('sql', [
    'SELECT a.x /* block */ FROM t a;',
    "select 'it''s' , x from t",
    'select (x from t',
    "select 'unterminated",
    '',
])
def test_canonicalize_is_idempotent(sql):
    once = canonicalize_sql(sql)
    assert canonicalize_sql(once) == once


def test_digest_ignores_formatting():
    assert sql_digest('SELECT x FROM t;') == sql_digest('select   x\nfrom t')
    assert sql_digest('select x from t') != sql_digest('select y from t')


def test_outer_order_by():
    assert outer_order_by('select x from t order by x') == (True, True)
    assert outer_order_by('select * from (select x from t order by x) s') == (False, True)
    assert outer_order_by("select x from t where y = 'order by'") == (False, True)
    assert outer_order_by('select (x from t order by x') == (False, False)


def test_query_identifiers_skip_keywords_functions_and_short_aliases():
    sql = 'select sum(ss_net_paid) from store_sales ss where ss.ss_item_sk = 5'
    assert query_identifiers(sql) == {'ss_net_paid', 'store_sales', 'ss_item_sk'}


def test_mentions_query_details():
    identifiers = query_identifiers('select ss_item_sk from store_sales')
    assert mentions_query_details('Push the filter on store_sales into the subquery', identifiers)
    assert not mentions_query_details('Push filters below joins', identifiers)


def test_normalize_text():
    assert normalize_text('1. Use **explicit** JOINs.') == 'use explicit joins'
    assert normalize_text('  - "Replace implicit joins"  ') == 'replace implicit joins'
