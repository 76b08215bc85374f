name = 'detrap'
version = '0.1.0'
description = 'RV32 simulator, trigger policy planner and binary scanner for debug-trigger return address protection.'
url = 'https://github.com/justengel/detrap'
author = 'Justin Engel'
author_email = 'jtengel08@gmail.com'
