import { describe, expect, it } from 'vitest';

import {
  DatasetRow,
  completionRate,
  errorCount,
  esc,
  groupRunsByDate,
  renderCalendar,
  renderDatasetTable,
  renderJobTable,
  stateBar,
} from '../src/model';

const ds: DatasetRow = {
  dataset_id: 3,
  description: 'd',
  category: 'test',
  alias: 'alias3',
  workflow: 'monolithic',
  declared_jobs: 10,
  total_jobs: 10,
  states: { OK: 8, PROCESSING: 2 },
};

describe('view model', () => {
  it('computes completion and errors', () => {
    expect(completionRate(ds)).toBeCloseTo(0.8);
    expect(errorCount(ds)).toBe(0);
    expect(errorCount({ ...ds, states: { ERROR: 2, FAILED: 1, OK: 7 } })).toBe(3);
  });

  it('renders dataset rows with per-state counts', () => {
    const html = renderDatasetTable([ds]);
    expect(html).toContain('OK:8');
    expect(html).toContain('PROCESSING:2');
    expect(html).toContain('80.0%');
    expect(html).toContain('#dataset/3');
  });

  it('escapes hostile text', () => {
    expect(esc('<script>alert(1)</script>')).not.toContain('<script>');
    const html = renderJobTable([
      {
        dataset_id: 1,
        job_index: 0,
        state: 'ERROR',
        retries: 1,
        site: null,
        host: null,
        error: '<img src=x onerror=alert(1)>',
      },
    ]);
    expect(html).not.toContain('<img');
  });

  it('stacked bar covers all jobs', () => {
    const svg = stateBar(ds, 200);
    expect(svg).toContain('OK: 8');
    expect(svg).toContain('PROCESSING: 2');
    const widths = [...svg.matchAll(/<rect [^>]*width="([0-9.]+)"/g)].map((m) => Number(m[1]));
    expect(widths.reduce((a, b) => a + b, 0)).toBeCloseTo(200, 0);
  });

  it('groups runs by date for the calendar view', () => {
    const runs = [
      { run_number: 2, date: '2026-01-02', path: 'b', job_index: 1, size: 1, md5: null },
      { run_number: 1, date: '2026-01-01', path: 'a', job_index: 0, size: 1, md5: null },
      { run_number: 3, date: '2026-01-02', path: 'c', job_index: 2, size: 1, md5: null },
    ];
    const grouped = groupRunsByDate(runs);
    expect([...grouped.keys()]).toEqual(['2026-01-01', '2026-01-02']);
    expect(grouped.get('2026-01-02')).toHaveLength(2);
    const html = renderCalendar(
      runs,
      new Map([
        [0, 'OK'],
        [1, 'OK'],
        [2, 'ERROR'],
      ]),
    );
    expect(html).toContain('day-ok');
    expect(html).toContain('day-bad');
  });
});
