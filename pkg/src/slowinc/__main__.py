from slowinc.cli import main

raise SystemExit(main())
